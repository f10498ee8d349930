#include "carn/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <random>
#include <thread>

#include "carn/checkpoint.hpp"
#include "carn/layers.hpp"

namespace carn {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size", "must be positive");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate", "must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay", "must be non-negative");
  if (epochs < 0) throw ConfigError("epochs", "must be non-negative");
  if (!(lambda >= 0)) throw ConfigError("lambda", "must be non-negative");
  if (!(epsilon > 0 && epsilon < 1)) throw ConfigError("epsilon", "must lie in (0, 1)");
  if (!(max_ratio >= 0 && max_ratio <= 1)) throw ConfigError("max_ratio", "must lie in [0, 1]");
  if (threads < 0) throw ConfigError("threads", "must be non-negative");
  if (shards < 1) throw ConfigError("shards", "must be positive");
  try {
    modality.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("modality", e.what());
  }
  model.validate();
}

namespace {

int worker_count(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Runs job(i) for i in [0, n) on up to `threads` workers.
template <typename Job>
void parallel_for(int n, int threads, Job&& job) {
  const int workers = std::min(threads, n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct ItemRef {
  int clip = 0;
  int qa = 0;
};

struct ClipCache {
  Eigen::MatrixXd embeddings;
  std::vector<int> face_ids;
  TargetSeq targets;
};

struct ShardResult {
  Gradients<double> grads;
  double loss = 0;
  double ce = 0;
  double rkl = 0;
};

class Adam {
 public:
  Adam(const ParamSet<double>& params, double lr, double weight_decay)
      : lr_(lr), decay_(weight_decay), m_(params.zeros_like()), v_(m_) {}

  void step(ParamSet<double>& params, const Gradients<double>& g) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, t_);
    const double c2 = 1.0 - std::pow(kBeta2, t_);
    for (int i = 0; i < params.size(); ++i) {
      m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * g[i];
      v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * g[i].cwiseProduct(g[i]);
      // Decoupled decay, applied before the moment update.
      if (decay_ > 0) params.value(i) *= 1.0 - lr_ * decay_;
      params.value(i).array() -=
          lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + kEps);
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  double lr_;
  double decay_;
  int t_ = 0;
  Gradients<double> m_, v_;
};

long count_qas(const std::vector<Clip>& corpus) {
  long n = 0;
  for (const auto& c : corpus) n += static_cast<long>(c.qas.size());
  return n;
}

long count_lines(const std::vector<Clip>& corpus) {
  long n = 0;
  for (const auto& c : corpus) n += static_cast<long>(c.subtitles.size());
  return n;
}

int corpus_face_dim(const std::vector<Clip>& corpus) {
  for (const auto& c : corpus) {
    for (const auto& f : c.frames) {
      if (!f.faces.empty()) return static_cast<int>(f.faces.front().embedding.size());
    }
  }
  return -1;
}

}  // namespace

Checkpoint train(const std::vector<Clip>& corpus, const TrainConfig& config,
                 const EpochCallback& on_epoch) {
  config.validate();
  if (corpus.empty()) throw EmptyInputError("training corpus is empty");
  if (count_qas(corpus) == 0) throw EmptyInputError("training corpus has no QA items");

  const long min_count =
      config.min_count > 0 ? config.min_count : scaled_min_count(count_lines(corpus));
  CastList cast = build_cast_list(count_speakers(corpus), min_count, config.max_ratio);
  Vocab vocab = Vocab::build(corpus, cast);
  ModelConfig mc = config.model;
  if (const int d = corpus_face_dim(corpus); d > 0) mc.d_f = d;

  Checkpoint ckpt{Model(mc, cast, std::move(vocab)), config};
  ckpt.train.model = mc;
  Model& model = ckpt.model;
  const auto human_words = config.human_word_set();

  std::vector<ClipCache> cache(corpus.size());
  std::vector<ItemRef> items;
  for (std::size_t c = 0; c < corpus.size(); ++c) {
    cache[c].embeddings = face_embeddings(corpus[c], &cache[c].face_ids);
    cache[c].targets = broadcast_targets(corpus[c], cast, config.epsilon);
    for (std::size_t q = 0; q < corpus[c].qas.size(); ++q) {
      items.push_back({static_cast<int>(c), static_cast<int>(q)});
    }
  }

  const int batch = std::min<int>(config.batch_size, static_cast<int>(items.size()));
  const int threads = worker_count(config.threads);
  Adam adam(model.params(), config.learning_rate, config.weight_decay);
  std::mt19937_64 rng(config.seed ^ 0x7a11c0ffeeULL);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(items.begin(), items.end(), rng);
    EpochStats stats;
    stats.epoch = epoch;
    for (std::size_t start = 0; start < items.size(); start += static_cast<std::size_t>(batch)) {
      const std::size_t end = std::min(items.size(), start + static_cast<std::size_t>(batch));
      const double inv_n = 1.0 / static_cast<double>(end - start);

      // Name assignments under the current naming head, once per clip.
      std::map<int, FaceNames> names;
      const NamingParams<double> head = model.naming_params();
      for (std::size_t i = start; i < end; ++i) {
        const int c = items[i].clip;
        if (!names.count(c)) {
          names.emplace(c, assign_names(predict_name_distributions<double>(corpus[c], head), cast));
        }
      }

      const int shards = config.shards;
      std::vector<ShardResult> results(static_cast<std::size_t>(shards));
      parallel_for(shards, threads, [&](int s) {
        ShardResult& r = results[static_cast<std::size_t>(s)];
        r.grads = model.params().zeros_like();
        for (std::size_t i = start + static_cast<std::size_t>(s); i < end;
             i += static_cast<std::size_t>(shards)) {
          const Clip& clip = corpus[items[i].clip];
          const QAItem& qa = clip.qas[items[i].qa];
          const ClipCache& cc = cache[items[i].clip];
          const ClipView view = clip_view(clip, qa, config.use_ts);
          const QAInput input = prepare_input(view.clip, qa, names.at(items[i].clip),
                                              config.modality, model.vocab(), human_words);
          Tape<double> tape(model.params(), &r.grads);
          auto ce = cross_entropy_logits(forward_logits(tape, model, input), qa.correct_index);
          Var<double> loss = ce;
          double rkl_value = 0;
          if (!cc.targets.entries.empty() && config.lambda > 0) {
            auto probs = name_distributions<double>(tape, cc.embeddings);
            auto rkl = rkl_loss(probs, cc.face_ids, cc.targets);
            rkl_value = tape.scalar(rkl);
            loss = loss + scale(rkl, config.lambda);
          }
          loss = scale(loss, inv_n);
          const double ce_value = tape.scalar(ce);
          const double total = ce_value + config.lambda * rkl_value;
          if (!std::isfinite(total)) throw NonFiniteLossError("training loss is not finite");
          r.loss += total;
          r.ce += ce_value;
          r.rkl += rkl_value;
          tape.backward(loss);
        }
      });

      Gradients<double> grads = std::move(results[0].grads);
      for (std::size_t s = 0; s < results.size(); ++s) {
        if (s > 0) {
          for (std::size_t p = 0; p < grads.size(); ++p) grads[p] += results[s].grads[p];
        }
        stats.loss += results[s].loss;
        stats.cross_entropy += results[s].ce;
        stats.rkl += results[s].rkl;
      }
      adam.step(model.params(), grads);
    }
    const double n = static_cast<double>(items.size());
    stats.loss /= n;
    stats.cross_entropy /= n;
    stats.rkl /= n;
    stats.face_acc = face_naming_accuracy(model, corpus);
    if (on_epoch) on_epoch(stats, model);
  }
  return ckpt;
}

double face_naming_accuracy(const Model& model, const std::vector<Clip>& corpus, long* faces,
                            long* correct) {
  long n = 0, hit = 0;
  const NamingParams<double> head = model.naming_params();
  for (const auto& clip : corpus) {
    if (!clip.truth) continue;
    const auto preds = predict_name_distributions<double>(clip, head);
    const auto labels = argmax_rows(preds.rows);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      auto it = clip.truth->find(preds.face_ids[i]);
      if (it == clip.truth->end()) continue;
      ++n;
      hit += labels[i] == map_speaker(it->second, model.cast());
    }
  }
  if (faces) *faces = n;
  if (correct) *correct = hit;
  return n == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(n);
}

namespace {

void tally(MetricsReport& m, const QAItem& qa, bool ok) {
  ++m.items;
  m.correct += ok;
  if (qa.kind == "visual") {
    ++m.visual_items;
    m.visual_correct += ok;
  } else if (qa.kind == "textual") {
    ++m.textual_items;
    m.textual_correct += ok;
  }
}

double ratio(long num, long den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

void finish(MetricsReport& m) {
  m.qa_acc = ratio(m.correct, m.items);
  m.qa_acc_visual = ratio(m.visual_correct, m.visual_items);
  m.qa_acc_textual = ratio(m.textual_correct, m.textual_items);
  m.face_acc = ratio(m.faces_correct, m.faces);
}

void check_compatible(const Model& model, const std::vector<Clip>& corpus) {
  const int d = corpus_face_dim(corpus);
  if (d > 0 && d != model.config().d_f) {
    throw VocabMismatchError("face embedding dimension " + std::to_string(d) +
                             " does not match checkpoint dimension " +
                             std::to_string(model.config().d_f));
  }
  const auto speakers = count_speakers(corpus);
  if (speakers.empty()) return;
  for (const auto& name : model.cast().names) {
    if (speakers.count(name)) return;
  }
  throw VocabMismatchError("no cast name of the checkpoint occurs as a speaker; first missing: '" +
                           model.cast().names.front() + "'");
}

}  // namespace

MetricsReport evaluate_with(const AnswerChooser& choose, const std::vector<Clip>& corpus,
                            bool use_ts) {
  MetricsReport m;
  m.use_ts = use_ts;
  for (const auto& clip : corpus) {
    for (const auto& qa : clip.qas) {
      const ClipView view = clip_view(clip, qa, use_ts);
      m.out_of_range += view.out_of_range;
      tally(m, qa, choose(view.clip, qa) == qa.correct_index);
    }
  }
  finish(m);
  return m;
}

MetricsReport evaluate(const Checkpoint& checkpoint, const std::vector<Clip>& corpus,
                       bool use_ts) {
  const Model& model = checkpoint.model;
  const TrainConfig& config = checkpoint.train;
  check_compatible(model, corpus);
  const auto human_words = config.human_word_set();
  const NamingParams<double> head = model.naming_params();

  // Per-clip choices computed in parallel, tallied in corpus order.
  std::vector<std::vector<int>> choices(corpus.size());
  std::vector<std::vector<char>> out_of_range(corpus.size());
  parallel_for(static_cast<int>(corpus.size()), worker_count(config.threads), [&](int c) {
    const Clip& clip = corpus[static_cast<std::size_t>(c)];
    const FaceNames names = assign_names(predict_name_distributions<double>(clip, head),
                                         model.cast());
    for (const auto& qa : clip.qas) {
      const ClipView view = clip_view(clip, qa, use_ts);
      const QAInput input =
          prepare_input(view.clip, qa, names, config.modality, model.vocab(), human_words);
      choices[static_cast<std::size_t>(c)].push_back(forward(model, input).choice);
      out_of_range[static_cast<std::size_t>(c)].push_back(view.out_of_range);
    }
  });

  MetricsReport m;
  m.variant = variant_label(config.modality);
  m.use_ts = use_ts;
  m.seed = config.seed;
  m.config_hash = config_hash(config);
  for (std::size_t c = 0; c < corpus.size(); ++c) {
    for (std::size_t q = 0; q < corpus[c].qas.size(); ++q) {
      m.out_of_range += out_of_range[c][q];
      tally(m, corpus[c].qas[q], choices[c][q] == corpus[c].qas[q].correct_index);
    }
  }
  face_naming_accuracy(model, corpus, &m.faces, &m.faces_correct);
  finish(m);
  return m;
}

std::string config_hash(const TrainConfig& config) {
  const std::string text = to_json(config).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

std::string slug(const std::string& label) {
  std::string out;
  for (char ch : label) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      out += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    } else if (ch == '_') {
      out += '_';
    } else if (ch == '+' && !out.empty() && out.back() != '-') {
      out += '-';
    }
  }
  return out;
}

}  // namespace

std::vector<AblationCell> ablate(const std::vector<Clip>& train_corpus,
                                 const std::vector<Clip>& eval_corpus, const TrainConfig& base,
                                 const std::vector<ModalityConfig>& variants,
                                 const std::vector<bool>& ts_settings,
                                 const std::filesystem::path& checkpoint_dir,
                                 const std::function<void(const AblationCell&)>& on_cell) {
  std::vector<AblationCell> cells;
  if (!checkpoint_dir.empty()) std::filesystem::create_directories(checkpoint_dir);
  for (const auto& variant : variants) {
    TrainConfig cfg = base;
    cfg.modality = variant;
    std::vector<EpochStats> curve;
    const Checkpoint ckpt =
        train(train_corpus, cfg, [&](const EpochStats& s, const Model&) { curve.push_back(s); });
    std::filesystem::path path;
    if (!checkpoint_dir.empty()) {
      path = checkpoint_dir / (slug(variant_label(variant)) + ".json");
      save_checkpoint(ckpt, path);
    }
    for (bool ts : ts_settings) {
      AblationCell cell{variant, ts, evaluate(ckpt, eval_corpus, ts), path};
      cell.metrics.curve = curve;
      if (on_cell) on_cell(cell);
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

void write_metrics_header(std::ostream& out) {
  out << "variant,use_ts,qa_acc,qa_acc_visual,qa_acc_textual,face_acc,seed\n";
}

namespace {

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

}  // namespace

void write_metrics_row(std::ostream& out, const MetricsReport& m) {
  out << csv_field(m.variant) << ',' << (m.use_ts ? "true" : "false") << ',' << fixed(m.qa_acc)
      << ',' << fixed(m.qa_acc_visual) << ',' << fixed(m.qa_acc_textual) << ','
      << fixed(m.face_acc) << ',' << m.seed << '\n';
}

void write_ablation_table(std::ostream& out, const std::vector<AblationCell>& cells) {
  std::vector<std::string> order;
  std::map<std::string, std::pair<std::string, std::string>> rows;
  for (const auto& cell : cells) {
    const std::string label = variant_label(cell.variant);
    if (!rows.count(label)) order.push_back(label);
    auto& row = rows[label];
    (cell.use_ts ? row.first : row.second) = fixed(cell.metrics.qa_acc);
  }
  out << "variant,w/ ts,w/o ts\n";
  for (const auto& label : order) {
    out << csv_field(label) << ',' << rows[label].first << ',' << rows[label].second << '\n';
  }
}

void write_loss_curve(std::ostream& out, const std::vector<EpochStats>& curve) {
  out << "epoch,loss,cross_entropy,rkl,face_acc\n";
  for (const auto& s : curve) {
    out << s.epoch << ',' << fixed(s.loss) << ',' << fixed(s.cross_entropy) << ','
        << fixed(s.rkl) << ',' << fixed(s.face_acc) << '\n';
  }
}

}  // namespace carn
