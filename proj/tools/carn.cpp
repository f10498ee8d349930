// Command-line front end: corpus generation, cast lists, semantic stream
// dumps, training, evaluation, ablation, gradient checks and reports.

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "carn/castlist.hpp"
#include "carn/checkpoint.hpp"
#include "carn/corpus.hpp"
#include "carn/gradcheck.hpp"
#include "carn/harness.hpp"
#include "carn/semantics.hpp"
#include "json.hpp"

using nlohmann::json;
using namespace carn;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("'" + path + "' is not valid JSON: " + e.what());
  }
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  return out;
}

struct TrainFlags {
  std::string config;
  std::optional<int> epochs, batch_size, threads;
  std::optional<double> lr, lambda;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> modality;
  std::optional<bool> use_ts;
  std::optional<int> d_model;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "Training config (JSON)");
    cmd->add_option("--epochs", epochs);
    cmd->add_option("--batch-size", batch_size);
    cmd->add_option("--lr", lr, "Learning rate");
    cmd->add_option("--lambda", lambda, "Naming loss weight");
    cmd->add_option("--seed", seed);
    cmd->add_option("--modality", modality, "e.g. sub,objs_nm,rels_nm");
    cmd->add_option("--use-ts", use_ts, "Train on time-stamped views (true/false)");
    cmd->add_option("--threads", threads);
    cmd->add_option("--d-model", d_model);
  }

  TrainConfig resolve() const {
    TrainConfig c;
    if (!config.empty()) c = train_config_from_json(read_json_file(config));
    if (epochs) c.epochs = *epochs;
    if (batch_size) c.batch_size = *batch_size;
    if (threads) c.threads = *threads;
    if (lr) c.learning_rate = *lr;
    if (lambda) c.lambda = *lambda;
    if (seed) {
      c.seed = *seed;
      c.model.seed = *seed;
    }
    if (modality) c.modality = parse_modality(*modality);
    if (use_ts) c.use_ts = *use_ts;
    if (d_model) c.model.d_model = *d_model;
    c.validate();
    return c;
  }
};

void print_epoch(const EpochStats& s) {
  std::cerr << "epoch " << s.epoch << "  loss " << std::fixed << std::setprecision(4) << s.loss
            << "  ce " << s.cross_entropy << "  rkl " << s.rkl << "  face_acc " << s.face_acc
            << '\n';
}

std::vector<bool> ts_settings(const std::string& which) {
  if (which == "both") return {true, false};
  if (which == "ts") return {true};
  if (which == "nots") return {false};
  throw std::invalid_argument("--ts must be one of both, ts, nots");
}

json qa_stream_json(const Clip& clip, std::size_t q, const FaceNames& names,
                    const ModalityConfig& modality, bool use_ts,
                    const std::set<std::string>& human_words) {
  const QAItem& qa = clip.qas[q];
  const ClipView view = clip_view(clip, qa, use_ts);
  json subs = json::array();
  if (modality.use_sub) {
    for (const auto& line : view.clip.subtitles) {
      json tokens = json::array({line.speaker});
      for (const auto& t : line.tokens) tokens.push_back(t);
      subs.push_back(tokens);
    }
  }
  json out = {{"clip_id", clip.clip_id}, {"qa", q}, {"subtitles", subs}};
  if (modality.uses_visual()) {
    const SemanticStream s = build_semantic_stream(view.clip, names, modality, human_words);
    out["objects"] = s.objects.tokens;
    out["relations"] = s.relations.tokens;
  }
  return out;
}

/// Median across seeds of each (variant, use_ts) metric.
void report(const std::vector<std::string>& inputs, std::ostream& out) {
  std::map<std::pair<std::string, std::string>, std::vector<std::vector<double>>> cells;
  std::vector<std::pair<std::string, std::string>> order;
  for (const auto& path : inputs) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::string line;
    std::getline(in, line);
    if (line.rfind("variant,use_ts,qa_acc", 0) != 0) {
      throw std::runtime_error("'" + path + "' is not a metrics CSV");
    }
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::stringstream ss(line);
      std::string item;
      while (std::getline(ss, item, ',')) f.push_back(item);
      if (f.size() != 7) throw std::runtime_error("malformed metrics row: " + line);
      auto key = std::make_pair(f[0], f[1]);
      if (!cells.count(key)) order.push_back(key);
      cells[key].push_back({std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5])});
    }
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  out << "variant,use_ts,runs,qa_acc,qa_acc_visual,qa_acc_textual,face_acc\n";
  for (const auto& key : order) {
    const auto& rows = cells[key];
    out << key.first << ',' << key.second << ',' << rows.size();
    for (int c = 0; c < 4; ++c) {
      std::vector<double> col;
      for (const auto& r : rows) col.push_back(r[static_cast<std::size_t>(c)]);
      out << ',' << std::fixed << std::setprecision(6) << median(col);
    }
    out << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Character-aware video story QA on synthetic episodes"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic corpus");
  std::string gen_config, gen_out;
  std::optional<std::uint64_t> gen_seed;
  std::optional<int> gen_clips, gen_k;
  std::optional<double> gen_noise, gen_rho;
  gen->add_option("--config", gen_config, "Generator config (JSON)");
  gen->add_option("--out", gen_out, "Output JSON Lines file")->required();
  gen->add_option("--seed", gen_seed);
  gen->add_option("--clips", gen_clips);
  gen->add_option("--k", gen_k, "Number of principal characters");
  gen->add_option("--noise", gen_noise, "Face embedding noise sigma");
  gen->add_option("--rho", gen_rho, "Speaker/face co-occurrence rate");

  // castlist
  auto* cast_cmd = app.add_subcommand("castlist", "Derive the principal cast from speakers");
  std::string cast_corpus, cast_out;
  std::optional<long> cast_min;
  double cast_ratio = kPaperMaxRatio;
  cast_cmd->add_option("--corpus", cast_corpus)->required();
  cast_cmd->add_option("--min-count", cast_min, "Default: scaled to corpus volume");
  cast_cmd->add_option("--max-ratio", cast_ratio);
  cast_cmd->add_option("--out", cast_out)->required();

  // semantics dump
  auto* sem = app.add_subcommand("semantics", "Semantic stream tools");
  auto* dump = sem->add_subcommand("dump", "Write per-QA token streams");
  sem->require_subcommand(1);
  std::string dump_corpus, dump_out, dump_ckpt, dump_modality = "sub,objs_nm,rels_nm";
  bool dump_ts = true;
  dump->add_option("--corpus", dump_corpus)->required();
  dump->add_option("--modality", dump_modality);
  dump->add_option("--checkpoint", dump_ckpt, "Name faces with this model (default: truth)");
  dump->add_option("--use-ts", dump_ts);
  dump->add_option("--out", dump_out)->required();

  // naming eval
  auto* naming = app.add_subcommand("naming", "Naming head tools");
  auto* naming_eval = naming->add_subcommand("eval", "Face-labeling accuracy vs truth");
  naming->require_subcommand(1);
  std::string ne_ckpt, ne_corpus;
  naming_eval->add_option("--checkpoint", ne_ckpt)->required();
  naming_eval->add_option("--corpus", ne_corpus)->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Joint training");
  TrainFlags train_flags;
  train_flags.attach(train_cmd);
  std::string train_corpus, train_out, train_metrics, train_curve, train_eval;
  train_cmd->add_option("--corpus", train_corpus)->required();
  train_cmd->add_option("--out", train_out, "Checkpoint path")->required();
  train_cmd->add_option("--metrics", train_metrics, "Metrics CSV (both ts settings)");
  train_cmd->add_option("--eval-corpus", train_eval, "Corpus for --metrics (default: training)");
  train_cmd->add_option("--curve", train_curve, "Per-epoch loss CSV");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_ckpt, eval_corpus, eval_out, eval_ts = "both";
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--corpus", eval_corpus)->required();
  eval_cmd->add_option("--ts", eval_ts, "both, ts or nots");
  eval_cmd->add_option("--out", eval_out, "Metrics CSV (default: stdout)");

  // ablate
  auto* abl = app.add_subcommand("ablate", "Train and evaluate modality variants");
  TrainFlags abl_flags;
  abl_flags.attach(abl);
  std::string abl_corpus, abl_eval, abl_out, abl_metrics, abl_dir, abl_ts = "both";
  std::vector<std::string> abl_variants;
  abl->add_option("--corpus", abl_corpus)->required();
  abl->add_option("--eval-corpus", abl_eval, "Default: training corpus");
  abl->add_option("--variants", abl_variants, "Subset of variants (default: all nine)");
  abl->add_option("--ts", abl_ts, "both, ts or nots");
  abl->add_option("--out", abl_out, "Table CSV")->required();
  abl->add_option("--metrics", abl_metrics, "Per-cell metrics CSV");
  abl->add_option("--checkpoint-dir", abl_dir);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and numeric gradients");
  std::vector<std::string> gc_components;
  GradCheckOptions gc_opts;
  std::string gc_perturb;
  gc->add_option("--component", gc_components, "naming, encoder, coattention, full");
  gc->add_option("--tolerance", gc_opts.tolerance);
  gc->add_option("--configs", gc_opts.configurations);
  gc->add_option("--seed", gc_opts.seed);
  gc->add_option("--perturb", gc_perturb, "Parameter group to corrupt by 1e-2");

  // report
  auto* rep = app.add_subcommand("report", "Median metrics over runs");
  std::vector<std::string> rep_inputs;
  std::string rep_out;
  rep->add_option("metrics", rep_inputs, "Metrics CSV files")->required();
  rep->add_option("--out", rep_out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      GenConfig c;
      if (!gen_config.empty()) c = gen_config_from_json(read_json_file(gen_config));
      if (gen_seed) c.seed = *gen_seed;
      if (gen_clips) c.n_clips = *gen_clips;
      if (gen_k) c.k_principals = *gen_k;
      if (gen_noise) c.noise_sigma = *gen_noise;
      if (gen_rho) c.cooccur_rho = *gen_rho;
      write_corpus(generate_corpus(c), gen_out);
    } else if (*cast_cmd) {
      const auto corpus = read_corpus(cast_corpus);
      long lines = 0;
      for (const auto& clip : corpus) lines += static_cast<long>(clip.subtitles.size());
      const CastList cast = build_cast_list(count_speakers(corpus),
                                            cast_min ? *cast_min : scaled_min_count(lines),
                                            cast_ratio);
      open_out(cast_out) << to_json(cast).dump(2) << '\n';
    } else if (*dump) {
      const auto corpus = read_corpus(dump_corpus);
      const ModalityConfig modality = parse_modality(dump_modality);
      std::optional<Checkpoint> ckpt;
      if (!dump_ckpt.empty()) ckpt = load_checkpoint(dump_ckpt);
      const auto human_words =
          ckpt ? ckpt->train.human_word_set() : TrainConfig{}.human_word_set();
      auto out = open_out(dump_out);
      for (const auto& clip : corpus) {
        FaceNames names;
        if (ckpt) {
          names = assign_names(predict_names(ckpt->model, clip), ckpt->model.cast());
        } else if (clip.truth) {
          names = *clip.truth;
        }
        for (std::size_t q = 0; q < clip.qas.size(); ++q) {
          out << qa_stream_json(clip, q, names, modality, dump_ts, human_words).dump() << '\n';
        }
      }
    } else if (*naming_eval) {
      const Checkpoint ckpt = load_checkpoint(ne_ckpt);
      long faces = 0, correct = 0;
      const double acc = face_naming_accuracy(ckpt.model, read_corpus(ne_corpus), &faces, &correct);
      std::cout << "face_acc " << std::fixed << std::setprecision(6) << acc << " (" << correct
                << "/" << faces << ")\n";
    } else if (*train_cmd) {
      const TrainConfig config = train_flags.resolve();
      const auto corpus = read_corpus(train_corpus);
      std::vector<EpochStats> curve;
      const Checkpoint ckpt = train(corpus, config, [&](const EpochStats& s, const Model&) {
        curve.push_back(s);
        print_epoch(s);
      });
      save_checkpoint(ckpt, train_out);
      if (!train_curve.empty()) {
        auto out = open_out(train_curve);
        write_loss_curve(out, curve);
      }
      if (!train_metrics.empty()) {
        const auto eval_corpus = train_eval.empty() ? corpus : read_corpus(train_eval);
        auto out = open_out(train_metrics);
        write_metrics_header(out);
        for (bool ts : {true, false}) write_metrics_row(out, evaluate(ckpt, eval_corpus, ts));
      }
    } else if (*eval_cmd) {
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      const auto corpus = read_corpus(eval_corpus);
      std::ofstream file;
      if (!eval_out.empty()) file = open_out(eval_out);
      std::ostream& out = eval_out.empty() ? std::cout : file;
      write_metrics_header(out);
      for (bool ts : ts_settings(eval_ts)) write_metrics_row(out, evaluate(ckpt, corpus, ts));
    } else if (*abl) {
      const TrainConfig base = abl_flags.resolve();
      const auto corpus = read_corpus(abl_corpus);
      const auto eval_corpus = abl_eval.empty() ? corpus : read_corpus(abl_eval);
      std::vector<ModalityConfig> variants;
      for (const auto& v : abl_variants) variants.push_back(parse_modality(v));
      if (variants.empty()) variants = ablation_variants();
      std::ofstream metrics;
      if (!abl_metrics.empty()) {
        metrics = open_out(abl_metrics);
        write_metrics_header(metrics);
      }
      const auto cells = ablate(corpus, eval_corpus, base, variants, ts_settings(abl_ts), abl_dir,
                                [&](const AblationCell& cell) {
                                  std::cerr << variant_label(cell.variant)
                                            << (cell.use_ts ? "  w/ ts  " : "  w/o ts  ")
                                            << cell.metrics.qa_acc << '\n';
                                  if (metrics.is_open()) write_metrics_row(metrics, cell.metrics);
                                });
      auto out = open_out(abl_out);
      write_ablation_table(out, cells);
    } else if (*gc) {
      if (!gc_components.empty()) {
        gc_opts.components.clear();
        for (const auto& c : gc_components) gc_opts.components.push_back(parse_component(c));
      }
      if (!gc_perturb.empty()) gc_opts.perturb_group = gc_perturb;
      const GradCheckReport r = grad_check(gc_opts);
      std::cout << "component,group,max_rel_error,entries,refined,status\n";
      for (const auto& g : r.groups) {
        std::cout << g.component << ',' << g.group << ',' << std::scientific
                  << std::setprecision(3) << g.max_rel_error << ',' << g.entries << ',' << g.refined << ','
                  << (g.passed ? "ok" : "FLAGGED") << '\n';
      }
      if (!r.passed()) return 2;
    } else if (*rep) {
      std::ofstream file;
      if (!rep_out.empty()) file = open_out(rep_out);
      report(rep_inputs, rep_out.empty() ? std::cout : file);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
