#include "carn/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <stdexcept>

#include "carn/layers.hpp"
#include "carn/model.hpp"
#include "carn/naming.hpp"

namespace carn {

std::string component_name(GradComponent c) {
  switch (c) {
    case GradComponent::Naming: return "naming";
    case GradComponent::Encoder: return "encoder";
    case GradComponent::CoAttention: return "coattention";
    case GradComponent::Full: return "full";
  }
  return "?";
}

GradComponent parse_component(const std::string& text) {
  if (text == "naming") return GradComponent::Naming;
  if (text == "encoder") return GradComponent::Encoder;
  if (text == "coattention" || text == "co-attention") return GradComponent::CoAttention;
  if (text == "full") return GradComponent::Full;
  throw std::invalid_argument("unknown gradient-check component '" + text + "'");
}

std::vector<GradComponent> all_components() {
  return {GradComponent::Naming, GradComponent::Encoder, GradComponent::CoAttention,
          GradComponent::Full};
}

bool GradCheckReport::passed() const {
  return std::all_of(groups.begin(), groups.end(), [](const GroupResult& g) { return g.passed; });
}

double GradCheckReport::max_error(GradComponent c) const {
  double worst = 0;
  for (const auto& g : groups) {
    if (g.component == component_name(c)) worst = std::max(worst, g.max_rel_error);
  }
  return worst;
}

namespace {

using Mat = Eigen::MatrixXd;
using Rng = std::mt19937_64;
using LossFn = std::function<Var<double>(Tape<double>&)>;

/// A parameter set plus a scalar loss over it.
struct Problem {
  ParamSet<double> params;
  LossFn loss;
  // Keeps a model alive when the loss reads from it.
  std::shared_ptr<Model> model;
};

Mat gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev = 0.5) {
  std::normal_distribution<double> n(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  }
  return m;
}

int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

void add_norm(ParamSet<double>& p, Rng& rng, const std::string& prefix, int d) {
  p.add(prefix + ".g", Mat::Ones(1, d) + gaussian(rng, 1, d, 0.1));
  p.add(prefix + ".b", gaussian(rng, 1, d, 0.1));
}

void add_ffn(ParamSet<double>& p, Rng& rng, const std::string& prefix, int d_in, int hidden,
             int d_out) {
  p.add(prefix + ".w1", gaussian(rng, d_in, hidden));
  p.add(prefix + ".b1", gaussian(rng, 1, hidden, 0.1));
  p.add(prefix + ".w2", gaussian(rng, hidden, d_out));
  p.add(prefix + ".b2", gaussian(rng, 1, d_out, 0.1));
}

void add_block(ParamSet<double>& p, Rng& rng, const std::string& prefix, int d, int d_ff,
               bool cross) {
  add_norm(p, rng, prefix + ".ln1", d);
  if (cross) add_norm(p, rng, prefix + ".lnc", d);
  p.add(prefix + ".att.wq", gaussian(rng, d, d));
  p.add(prefix + ".att.wk", gaussian(rng, d, d));
  add_norm(p, rng, prefix + ".ln2", d);
  add_ffn(p, rng, prefix + ".ff", d, d_ff, d);
}

Mask random_mask(Rng& rng, int length) {
  Mask m(static_cast<std::size_t>(length), 1);
  for (auto& v : m) v = std::bernoulli_distribution(0.75)(rng) ? 1 : 0;
  m[static_cast<std::size_t>(uniform_int(rng, 0, length - 1))] = 1;
  return m;
}

/// Linear read-out so every output coordinate carries its own weight.
Var<double> readout(Var<double> out, const Mat& weights) {
  auto w = out.tape->constant(weights);
  return sum(matmul(out, w));
}

TargetSeq random_targets(Rng& rng, const std::vector<int>& face_ids,
                         const std::vector<int>& frame_of, int classes, double eps) {
  TargetSeq seq;
  seq.epsilon = eps;
  std::map<int, int> speaker;
  for (int f : frame_of) {
    if (!speaker.count(f)) speaker[f] = uniform_int(rng, 0, classes - 2);
  }
  for (std::size_t i = 0; i < face_ids.size(); ++i) {
    Eigen::VectorXd g = Eigen::VectorXd::Constant(classes, eps / classes);
    g(speaker[frame_of[i]]) += 1.0 - eps;
    seq.entries.push_back({face_ids[i], frame_of[i], g});
  }
  return seq;
}

Problem naming_problem(Rng& rng) {
  const int d_f = uniform_int(rng, 2, 6);
  const int hidden = uniform_int(rng, 2, 6);
  const int classes = uniform_int(rng, 2, 5);
  const int faces = uniform_int(rng, 1, 6);
  Problem pb;
  add_ffn(pb.params, rng, "naming", d_f, hidden, classes);
  const Mat emb = gaussian(rng, faces, d_f, 1.0);
  std::vector<int> ids, frames;
  for (int i = 0; i < faces; ++i) {
    ids.push_back(10 + i);
    frames.push_back(uniform_int(rng, 0, 2));
  }
  const double eps = std::uniform_real_distribution<double>(0.01, 0.3)(rng);
  const TargetSeq targets = random_targets(rng, ids, frames, classes, eps);
  pb.loss = [emb, ids, targets](Tape<double>& t) {
    return rkl_loss(name_distributions<double>(t, emb), ids, targets);
  };
  return pb;
}

Problem encoder_problem(Rng& rng) {
  const int d = 8;
  const int heads = std::array<int, 3>{1, 2, 4}[uniform_int(rng, 0, 2)];
  const int layers = uniform_int(rng, 1, 2);
  const int len = uniform_int(rng, 1, 6);
  Problem pb;
  for (int l = 0; l < layers; ++l) {
    add_block(pb.params, rng, "enc.l" + std::to_string(l), d, 12, false);
  }
  add_norm(pb.params, rng, "enc.ln_f", d);
  const Mat x = gaussian(rng, len, d, 1.0);
  const Mask mask = random_mask(rng, len);
  const Mat w = gaussian(rng, d, 1, 1.0);
  pb.loss = [=](Tape<double>& t) {
    return readout(encode(t.constant(x), "enc", layers, heads, mask), w);
  };
  return pb;
}

Problem coattention_problem(Rng& rng) {
  const int d = 8;
  const int heads = std::array<int, 3>{1, 2, 4}[uniform_int(rng, 0, 2)];
  const int layers = uniform_int(rng, 1, 2);
  const int len = uniform_int(rng, 1, 6);
  const int ctx_len = uniform_int(rng, 1, 6);
  Problem pb;
  for (int l = 0; l < layers; ++l) {
    add_block(pb.params, rng, "dec.l" + std::to_string(l), d, 12, true);
  }
  add_norm(pb.params, rng, "dec.ln_f", d);
  const Mat x = gaussian(rng, len, d, 1.0);
  const Mat ctx = gaussian(rng, ctx_len, d, 1.0);
  const Mask mask = random_mask(rng, ctx_len);
  const Mat w = gaussian(rng, d, 1, 1.0);
  pb.loss = [=](Tape<double>& t) {
    return readout(co_attend(t.constant(x), t.constant(ctx), "dec", layers, heads, mask), w);
  };
  return pb;
}

TokenStream random_stream(Rng& rng, const std::vector<std::string>& pool, int max_len,
                          const Vocab& vocab, bool allow_pad) {
  TokenStream s;
  const int len = uniform_int(rng, 1, max_len);
  for (int i = 0; i < len; ++i) {
    const std::string& tok = pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))];
    s.push(tok, vocab.is_name(tok));
  }
  if (allow_pad && len < max_len && std::bernoulli_distribution(0.5)(rng)) s.push(kPadToken, false);
  return s;
}

Problem full_problem(Rng& rng) {
  ModelConfig mc;
  mc.d_model = 8;
  mc.d_ff = 12;
  mc.heads = std::array<int, 3>{1, 2, 4}[uniform_int(rng, 0, 2)];
  mc.encoder_layers = uniform_int(rng, 1, 2);
  mc.decoder_layers = uniform_int(rng, 1, 2);
  mc.final_layers = 1;
  mc.naming_hidden = 5;
  mc.d_f = 4;
  mc.seed = rng();
  CastList cast;
  cast.names = {"Ann", "Bob"};
  cast.counts = {9, 7};
  cast.unk_index = 2;
  Vocab vocab({"cup", "holds", "man", "red", "the", "what", "does", "?"},
              {"Ann", "Bob", "Cid"});
  auto model = std::make_shared<Model>(mc, cast, vocab);
  // Perturb the initial values so that no tensor sits at a symmetric point.
  for (int i = 0; i < model->params().size(); ++i) {
    auto& v = model->params().value(i);
    v += gaussian(rng, v.rows(), v.cols(), 0.2);
  }

  const std::vector<std::string> pool = {"cup", "holds", "man", "red", "the",
                                         "what", "Ann", "Bob", "Cid", "zebra"};
  QAInput input;
  const TokenStream question = random_stream(rng, pool, 3, vocab, false);
  for (auto& c : input.candidates) {
    c = question;
    c.append(random_stream(rng, pool, 3, vocab, true));
  }
  input.subtitles = random_stream(rng, pool, 6, vocab, true);
  input.visual = random_stream(rng, pool, 6, vocab, true);
  const int gold = uniform_int(rng, 0, kCandidates - 1);

  const int faces = uniform_int(rng, 1, 5);
  const Mat emb = gaussian(rng, faces, mc.d_f, 1.0);
  std::vector<int> ids, frames;
  for (int i = 0; i < faces; ++i) {
    ids.push_back(i);
    frames.push_back(uniform_int(rng, 0, 1));
  }
  const TargetSeq targets = random_targets(rng, ids, frames, cast.classes(), 0.05);
  const double lambda = std::uniform_real_distribution<double>(0.5, 2.0)(rng);

  Problem pb;
  pb.model = model;
  pb.loss = [model = model.get(), input, gold, emb, ids, targets, lambda](Tape<double>& t) {
    auto ce = cross_entropy_logits(forward_logits(t, *model, input), gold);
    auto rkl = rkl_loss(name_distributions<double>(t, emb), ids, targets);
    return ce + scale(rkl, lambda);
  };
  return pb;
}

Problem make_problem(GradComponent c, Rng& rng) {
  switch (c) {
    case GradComponent::Naming: return naming_problem(rng);
    case GradComponent::Encoder: return encoder_problem(rng);
    case GradComponent::CoAttention: return coattention_problem(rng);
    case GradComponent::Full: return full_problem(rng);
  }
  throw std::logic_error("unhandled component");
}

double evaluate_loss(const ParamSet<double>& params, const LossFn& loss) {
  Tape<double> tape(params, nullptr);
  return tape.scalar(loss(tape));
}

std::vector<Eigen::Index> sample_entries(Rng& rng, const Mat& analytic, int max_entries) {
  const Eigen::Index n = analytic.size();
  std::vector<Eigen::Index> all(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  if (n <= max_entries) return all;
  std::vector<Eigen::Index> nonzero;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (analytic.data()[i] != 0.0) nonzero.push_back(i);
  }
  std::shuffle(nonzero.begin(), nonzero.end(), rng);
  std::shuffle(all.begin(), all.end(), rng);
  std::vector<Eigen::Index> out(nonzero.begin(),
                                nonzero.begin() + std::min<std::ptrdiff_t>(
                                                      static_cast<std::ptrdiff_t>(nonzero.size()),
                                                      max_entries / 2));
  for (Eigen::Index i : all) {
    if (static_cast<int>(out.size()) >= max_entries) break;
    if (std::find(out.begin(), out.end(), i) == out.end()) out.push_back(i);
  }
  return out;
}

}  // namespace

// Relative errors are taken against at least this gradient scale, so groups
// whose true gradient is zero (a bias shared by all logits) compare rounding
// noise to 1e-5 rather than to itself.
constexpr double kGradFloor = 1e-5;

GradCheckReport grad_check(const GradCheckOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckReport report;
  report.tolerance = options.tolerance;
  report.configurations = options.configurations;
  Rng rng(options.seed ^ 0x9d2c5680ULL);

  for (GradComponent component : options.components) {
    std::vector<std::string> order;
    std::map<std::string, GroupResult> groups;
    for (int cfg = 0; cfg < options.configurations; ++cfg) {
      Problem pb = make_problem(component, rng);
      ParamSet<double>& params = pb.model ? pb.model->params() : pb.params;

      Gradients<double> analytic = params.zeros_like();
      {
        Tape<double> tape(params, &analytic);
        tape.backward(pb.loss(tape));
      }

      const double base = evaluate_loss(params, pb.loss);
      for (int p = 0; p < params.size(); ++p) {
        const std::string& name = params.name(p);
        if (!groups.count(name)) {
          order.push_back(name);
          groups[name] = GroupResult{component_name(component), name, 0.0, 0, 0, true};
        }
        const auto entries = sample_entries(rng, analytic[p], options.max_entries);
        Mat& value = params.value(p);
        Eigen::VectorXd a(static_cast<Eigen::Index>(entries.size()));
        Eigen::VectorXd n(a.size());
        long refined = 0;
        for (std::size_t e = 0; e < entries.size(); ++e) {
          double* x = value.data() + entries[e];
          const double saved = *x;
          auto central = [&](double h, double* fwd, double* bwd) {
            *x = saved + h;
            const double up = evaluate_loss(params, pb.loss);
            *x = saved - h;
            const double down = evaluate_loss(params, pb.loss);
            *x = saved;
            *fwd = (up - base) / h;
            *bwd = (base - down) / h;
            return (up - down) / (2.0 * h);
          };
          // One-sided slopes that disagree by more than rounding noise mean a
          // ReLU or hard-min kink lies within the step; smaller steps move off it.
          auto kinked = [&](double h, double fwd, double bwd) {
            const double noise = 40.0 * std::numeric_limits<double>::epsilon() *
                                 std::max(std::abs(base), 1.0) / h;
            const double scale = std::max({std::abs(fwd), std::abs(bwd), kGradFloor});
            return std::abs(fwd - bwd) > std::max(0.1 * options.tolerance * scale, noise);
          };
          double fwd = 0, bwd = 0;
          double numeric = central(options.step, &fwd, &bwd);
          if (kinked(options.step, fwd, bwd)) {
            ++refined;
            double best_gap = std::abs(fwd - bwd);
            for (double h = options.step / 10; h >= options.step / 100; h /= 10) {
              const double c = central(h, &fwd, &bwd);
              if (std::abs(fwd - bwd) < best_gap) {
                best_gap = std::abs(fwd - bwd);
                numeric = c;
              }
              if (!kinked(h, fwd, bwd)) break;
            }
          }
          n(static_cast<Eigen::Index>(e)) = numeric;
          a(static_cast<Eigen::Index>(e)) = analytic[p].data()[entries[e]];
        }
        if (options.perturb_group && *options.perturb_group == name && a.size() > 0) {
          a(0) += options.perturbation;
        }
        double err = 0;
        if (a.size() > 0) {
          const double denom =
              std::max({a.cwiseAbs().maxCoeff(), n.cwiseAbs().maxCoeff(), kGradFloor});
          err = (a - n).cwiseAbs().maxCoeff() / denom;
        }
        GroupResult& g = groups[name];
        g.max_rel_error = std::max(g.max_rel_error, err);
        g.entries += a.size();
        g.refined += refined;
      }
    }
    for (const auto& name : order) {
      GroupResult g = groups[name];
      g.passed = g.max_rel_error <= options.tolerance;
      report.groups.push_back(std::move(g));
    }
  }
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace carn
