// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Criteria 3-5 share one set of training runs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "carn/castlist.hpp"
#include "carn/checkpoint.hpp"
#include "carn/gradcheck.hpp"
#include "carn/harness.hpp"
#include "carn/layers.hpp"
#include "carn/naming.hpp"
#include "carn/semantics.hpp"

using namespace carn;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// 1. rkl against the triple loop

double loop_rkl(const Eigen::MatrixXd& p, const std::vector<int>& frame_of,
                const std::map<int, Eigen::VectorXd>& targets) {
  double total = 0;
  for (const auto& [frame, g] : targets) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < p.rows(); ++j) {
      if (frame_of[static_cast<std::size_t>(j)] != frame) continue;
      double kl = 0;
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        if (p(j, c) > 0) kl += p(j, c) * std::log(p(j, c) / g(c));
      }
      best = std::min(best, kl);
    }
    total += best;
  }
  return total;
}

Outcome loss_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> normal(0.0, 1.5);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 20);
    const int k = 1 + static_cast<int>(rng() % 6);
    const int classes = k + 1;
    const double eps = std::array<double, 3>{0.01, 0.05, 0.2}[trial % 3];
    const int d_f = 8;
    NamingParams<double> head = NamingParams<double>::zeros(d_f, 6, classes);
    for (auto* m : {&head.w1, &head.b1, &head.w2, &head.b2}) {
      *m = m->unaryExpr([&](double) { return normal(rng); });
    }
    Eigen::MatrixXd emb(n, d_f);
    for (Eigen::Index i = 0; i < emb.size(); ++i) emb.data()[i] = normal(rng);
    NameDistributionSeq<double> preds{name_distributions<double>(emb, head), {}};

    std::vector<int> frame_of(static_cast<std::size_t>(n));
    std::map<int, Eigen::VectorXd> targets;
    TargetSeq seq;
    seq.epsilon = eps;
    for (int i = 0; i < n; ++i) {
      preds.face_ids.push_back(7 * i + 1);
      frame_of[static_cast<std::size_t>(i)] = static_cast<int>(rng() % 6);
    }
    for (int i = 0; i < n; ++i) {
      const int fr = frame_of[static_cast<std::size_t>(i)];
      if (!targets.count(fr)) {
        Eigen::VectorXd g = Eigen::VectorXd::Constant(classes, eps / classes);
        g(static_cast<Eigen::Index>(rng() % static_cast<unsigned>(k))) += 1.0 - eps;
        targets[fr] = g;
      }
      seq.entries.push_back({7 * i + 1, fr, targets[fr]});
    }
    worst = std::max(worst, std::abs(rkl_loss(preds, seq) - loop_rkl(preds.rows, frame_of, targets)));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-9 && secs < 5.0,
          "max |diff| " + fmt("%.2e", worst) + " over 100 instances, " + fmt("%.2f", secs) + " s"};
}

// ---------------------------------------------------------------------------
// 2. gradient checks

Outcome gradient_checks() {
  GradCheckOptions opt;
  opt.configurations = 10;
  opt.tolerance = 1e-4;
  opt.step = 1e-5;
  const GradCheckReport r = grad_check(opt);
  std::string detail;
  for (auto c : all_components()) {
    detail += component_name(c) + " " + fmt("%.1e", r.max_error(c)) + ", ";
  }
  detail += std::to_string(r.groups.size()) + " groups, " + fmt("%.1f", r.seconds) + " s";
  return {r.passed() && r.seconds < 120.0, detail};
}

// ---------------------------------------------------------------------------
// 3-5. training runs

constexpr int kTrainClips = 200;
constexpr int kHeldOutClips = 60;
constexpr int kEpochs = 8;
const std::vector<std::uint64_t> kSeeds = {1, 2, 3};

struct VariantRun {
  double seconds = 0;
  MetricsReport with_ts;
  MetricsReport without_ts;
  double train_face_acc = 0;
};

struct SeedRuns {
  std::map<std::string, VariantRun> by_variant;
};

std::vector<SeedRuns> g_runs;

const std::vector<std::string> kVariants = {"sub", "sub,objs", "sub,objs_nm,rels_nm"};

void run_training() {
  for (auto seed : kSeeds) {
    GenConfig g;
    g.k_principals = 4;
    g.noise_sigma = 0.1;
    g.cooccur_rho = 0.9;
    g.n_clips = kTrainClips + kHeldOutClips;
    g.seed = seed;
    // Per-clip random streams make the first 200 clips exactly the 200-clip
    // corpus for this seed; the rest are held out for QA accuracy.
    const auto all = generate_corpus(g);
    const std::vector<Clip> train_set(all.begin(), all.begin() + kTrainClips);
    const std::vector<Clip> held_out(all.begin() + kTrainClips, all.end());

    SeedRuns runs;
    for (const auto& v : kVariants) {
      TrainConfig c;
      c.epochs = kEpochs;
      c.seed = seed;
      c.model.seed = seed;
      c.modality = parse_modality(v);
      const auto t0 = Clock::now();
      const Checkpoint ck = train(train_set, c);
      VariantRun run;
      run.seconds = seconds_since(t0);
      run.train_face_acc = face_naming_accuracy(ck.model, train_set);
      run.with_ts = evaluate(ck, held_out, true);
      run.without_ts = evaluate(ck, held_out, false);
      std::fprintf(stderr,
                   "  seed %llu %-22s %6.1f s  face %.3f  visual %.3f  qa w/ ts %.3f  w/o ts %.3f\n",
                   static_cast<unsigned long long>(seed), variant_label(c.modality).c_str(),
                   run.seconds, run.train_face_acc, run.with_ts.qa_acc_visual, run.with_ts.qa_acc,
                   run.without_ts.qa_acc);
      runs.by_variant[v] = run;
    }
    g_runs.push_back(std::move(runs));
  }
}

Outcome weak_naming() {
  std::vector<double> acc;
  double slowest = 0;
  for (const auto& r : g_runs) {
    const auto& full = r.by_variant.at("sub,objs_nm,rels_nm");
    acc.push_back(full.train_face_acc);
    slowest = std::max(slowest, full.seconds);
  }
  const double m = median(acc);
  return {m >= 0.85 && slowest <= 600.0,
          "median face accuracy " + fmt("%.3f", m) + " after " + std::to_string(kEpochs) +
              " epochs, slowest run " + fmt("%.0f", slowest) + " s"};
}

Outcome ablation_direction() {
  std::vector<double> sub, objs, full, gap;
  double slowest = 0;
  for (const auto& r : g_runs) {
    const double s = r.by_variant.at("sub").with_ts.qa_acc_visual;
    const double o = r.by_variant.at("sub,objs").with_ts.qa_acc_visual;
    const double f = r.by_variant.at("sub,objs_nm,rels_nm").with_ts.qa_acc_visual;
    sub.push_back(s);
    objs.push_back(o);
    full.push_back(f);
    gap.push_back(f - s);
    double t = 0;
    for (const auto& [name, run] : r.by_variant) t += run.seconds;
    slowest = std::max(slowest, t);
  }
  const double ms = median(sub), mo = median(objs), mf = median(full), mg = median(gap);
  const bool ok = ms >= 0.10 && ms <= 0.30 && mf >= mo && mo >= ms && mg >= 0.20 &&
                  slowest <= 1800.0;
  return {ok, "visual subset medians: Sub " + fmt("%.3f", ms) + ", Sub + Objs " + fmt("%.3f", mo) +
                  ", Sub + Objs_nm + Rels_nm " + fmt("%.3f", mf) + ", gap " + fmt("%.3f", mg) +
                  "; slowest seed " + fmt("%.0f", slowest) + " s for 3 variants"};
}

Outcome protocol_direction() {
  std::vector<double> diff, with, without;
  for (const auto& r : g_runs) {
    const auto& full = r.by_variant.at("sub,objs_nm,rels_nm");
    with.push_back(full.with_ts.qa_acc);
    without.push_back(full.without_ts.qa_acc);
    diff.push_back(full.with_ts.qa_acc - full.without_ts.qa_acc);
  }
  const double md = median(diff);
  return {md >= -0.02, "median w/ ts " + fmt("%.3f", median(with)) + ", w/o ts " +
                           fmt("%.3f", median(without)) + ", median difference " +
                           fmt("%.3f", md)};
}

// ---------------------------------------------------------------------------
// 6. cast list rule

Outcome cast_rule() {
  long cases = 0, bad = 0;
  auto expect_names = [&](const std::map<std::string, long>& counts, long m, double r,
                          const std::vector<std::string>& want) {
    ++cases;
    try {
      if (build_cast_list(counts, m, r).names != want) ++bad;
    } catch (const EmptyCastError&) {
      if (!want.empty()) ++bad;
    }
  };
  expect_names({{"Ted", 900}, {"Lily", 620}, {"Marshall", 510}, {"Guest", 60}}, 500, 0.1,
               {"Ted", "Lily", "Marshall"});
  expect_names({{"A", 2000}, {"B", 150}}, 500, 0.1, {"A"});
  expect_names({{"A", 499}}, 500, 0.1, {});
  expect_names({{"A", 500}}, 500, 0.1, {});
  expect_names({{"A", 501}}, 500, 0.1, {"A"});
  expect_names({{"A", 10000}, {"B", 999}, {"C", 1000}}, 500, 0.1, {"A", "C"});
  expect_names({{"Zed", 600}, {"Amy", 600}, {"Bob", 700}}, 500, 0.1, {"Bob", "Amy", "Zed"});

  const std::vector<long> values = {1, 2, 3, 9, 10, 50, 499, 500, 501, 900, 5000};
  const std::vector<std::pair<long, double>> settings = {
      {500, 0.1}, {2, 0.1}, {9, 0.5}, {1, 1.0}, {499, 0.01}};
  for (auto [m, r] : settings) {
    for (long a : values) {
      for (long b : values) {
        for (long c : values) {
          std::map<std::string, long> counts{{"ann", a}, {"bob", b}, {"cid", c}};
          const long top = std::max({a, b, c});
          std::vector<std::pair<long, std::string>> keep;
          for (const auto& [name, n] : counts) {
            if (n > m && static_cast<double>(n) >= r * static_cast<double>(top)) {
              keep.push_back({-n, name});
            }
          }
          std::sort(keep.begin(), keep.end());
          std::vector<std::string> want;
          for (const auto& kv : keep) want.push_back(kv.second);
          expect_names(counts, m, r, want);
        }
      }
    }
  }
  return {bad == 0, std::to_string(cases - bad) + "/" + std::to_string(cases) + " cases"};
}

// ---------------------------------------------------------------------------
// 7. invariants

Model tiny_model(std::uint64_t seed) {
  ModelConfig mc;
  mc.d_model = 16;
  mc.d_ff = 16;
  mc.naming_hidden = 8;
  mc.d_f = 4;
  mc.seed = seed;
  CastList cast;
  cast.names = {"Ted", "Lily"};
  cast.counts = {5, 4};
  cast.unk_index = 2;
  return Model(mc, cast,
               Vocab({"?", "cup", "does", "hat", "holds", "what", "i", "love", "paris", "man"},
                     {"Ted", "Lily", "Carl"}));
}

QAInput random_input(const Model& m, std::mt19937_64& rng) {
  const std::vector<std::string> pool = {"cup", "hat", "holds", "what", "i", "love",
                                         "paris", "Ted", "Lily", "Carl", "qq"};
  auto pick = [&](int lo, int hi) {
    Tokens t;
    const int n = lo + static_cast<int>(rng() % static_cast<unsigned>(hi - lo + 1));
    for (int i = 0; i < n; ++i) t.push_back(pool[rng() % pool.size()]);
    return m.vocab().flag_text(t);
  };
  QAInput in;
  const TokenStream q = pick(2, 4);
  for (auto& c : in.candidates) {
    c = q;
    c.append(pick(1, 2));
  }
  in.subtitles = pick(0, 8);
  in.visual = pick(0, 8);
  return in;
}

std::string run_and_serialize(const std::vector<Clip>& data) {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 16;
  c.threads = 1;
  c.seed = 5;
  c.model.d_model = 16;
  c.model.d_ff = 16;
  c.model.seed = 5;
  const Checkpoint ck = train(data, c);
  const auto path = std::filesystem::temp_directory_path() / "carn_acceptance_ckpt.json";
  save_checkpoint(ck, path);
  std::ifstream in(path, std::ios::binary);
  std::ostringstream bytes;
  bytes << in.rdbuf();
  std::filesystem::remove(path);
  write_metrics_header(bytes);
  write_metrics_row(bytes, evaluate(ck, data, true));
  write_metrics_row(bytes, evaluate(ck, data, false));
  return bytes.str();
}

Outcome invariants() {
  std::vector<std::string> failed;
  std::mt19937_64 rng(77);
  std::normal_distribution<double> normal(0.0, 3.0);

  // Softmax rows, with and without masks.
  bool softmax_ok = true;
  for (int trial = 0; trial < 200; ++trial) {
    const int rows = 1 + static_cast<int>(rng() % 6), cols = 1 + static_cast<int>(rng() % 9);
    Eigen::MatrixXd x(rows, cols);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
    Mask mask(static_cast<std::size_t>(cols), 1);
    if (trial % 2) {
      for (auto& v : mask) v = static_cast<char>(rng() % 2);
      mask[rng() % mask.size()] = 1;
    }
    const auto p = softmax_rows_value<double>(x, mask);
    softmax_ok = softmax_ok && (p.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-6 &&
                 p.minCoeff() >= 0;
  }

  // Equivariance, pad invariance and the output distribution on random inputs.
  bool equi_ok = true, pad_ok = true;
  for (int trial = 0; trial < 20; ++trial) {
    const Model m = tiny_model(static_cast<std::uint64_t>(trial));
    const QAInput in = random_input(m, rng);
    const auto base = forward(m, in).probs;
    softmax_ok = softmax_ok && std::abs(base.sum() - 1.0) <= 1e-6;
    std::array<int, kCandidates> perm{0, 1, 2, 3, 4};
    std::shuffle(perm.begin(), perm.end(), rng);
    QAInput permuted = in;
    for (int c = 0; c < kCandidates; ++c) permuted.candidates[c] = in.candidates[perm[c]];
    const auto moved = forward(m, permuted).probs;
    for (int c = 0; c < kCandidates; ++c) {
      equi_ok = equi_ok && std::abs(moved(c) - base(perm[c])) <= 1e-9;
    }
    QAInput padded = in;
    for (auto& c : padded.candidates) c.push(kPadToken, false);
    for (int i = 0; i < 3; ++i) {
      padded.subtitles.push(kPadToken, false);
      padded.visual.push(kPadToken, false);
    }
    pad_ok = pad_ok && (forward(m, padded).probs - base).cwiseAbs().maxCoeff() <= 1e-6;
  }

  // replace_names on generated frames with truth names.
  bool replace_ok = true;
  GenConfig g;
  g.n_clips = 20;
  g.seed = 9;
  const auto clips = generate_corpus(g);
  const auto human = default_human_words();
  for (const auto& clip : clips) {
    for (const auto& f : clip.frames) {
      const auto a = match_faces_to_humans(f.faces, f.human_boxes);
      const auto once = replace_names(f.triples, f.human_boxes, a, *clip.truth, human);
      const auto twice = replace_names(once, f.human_boxes, a, *clip.truth, human);
      replace_ok = replace_ok && once == twice && once.size() == f.triples.size();
      for (std::size_t i = 0; i < once.size() && replace_ok; ++i) {
        replace_ok = once[i].predicate == f.triples[i].predicate &&
                     (human.count(f.triples[i].subject) || once[i].subject == f.triples[i].subject) &&
                     (human.count(f.triples[i].object) || once[i].object == f.triples[i].object);
      }
    }
  }

  // Byte-level determinism of train + eval.
  g.n_clips = 6;
  g.seed = 4;
  const auto small = generate_corpus(g);
  const bool determinism_ok = run_and_serialize(small) == run_and_serialize(small);

  if (!softmax_ok) failed.push_back("softmax");
  if (!equi_ok) failed.push_back("equivariance");
  if (!pad_ok) failed.push_back("pad");
  if (!replace_ok) failed.push_back("replace_names");
  if (!determinism_ok) failed.push_back("determinism");
  std::string detail = "softmax, equivariance, pad, replace_names, determinism";
  if (!failed.empty()) {
    detail = "failed:";
    for (const auto& f : failed) detail += " " + f;
  }
  return {failed.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  // Optional criterion ids on the command line select a subset.
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "loss oracle equivalence", loss_oracle},
      {2, "gradient checks", gradient_checks},
      {3, "weak-supervision naming", weak_naming},
      {4, "ablation direction", ablation_direction},
      {5, "protocol direction", protocol_direction},
      {6, "cast-list rule", cast_rule},
      {7, "invariant suite", invariants},
  };
  int failures = 0;
  bool trained = false;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    if (c.id >= 3 && c.id <= 5 && !trained) {
      std::fprintf(stderr, "training 3 variants x %zu seeds...\n", kSeeds.size());
      run_training();
      trained = true;
    }
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("[%s] criterion %d %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
