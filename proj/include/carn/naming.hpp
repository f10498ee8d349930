#ifndef CARN_NAMING_HPP
#define CARN_NAMING_HPP

// Weakly supervised character identification: per-face name distributions,
// speaker-broadcast targets and the min-over-faces KL loss.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "carn/autodiff.hpp"
#include "carn/castlist.hpp"
#include "carn/corpus.hpp"
#include "carn/errors.hpp"
#include "carn/semantics.hpp"

namespace carn {

inline constexpr double kDefaultEpsilon = 0.05;

template <typename Scalar>
struct NamingParams {
  Matrix<Scalar> w1;  // d_f x hidden
  Matrix<Scalar> b1;  // 1 x hidden
  Matrix<Scalar> w2;  // hidden x classes
  Matrix<Scalar> b2;  // 1 x classes

  static NamingParams zeros(Eigen::Index d_f, Eigen::Index hidden, Eigen::Index classes) {
    return {Matrix<Scalar>::Zero(d_f, hidden), Matrix<Scalar>::Zero(1, hidden),
            Matrix<Scalar>::Zero(hidden, classes), Matrix<Scalar>::Zero(1, classes)};
  }
};

template <typename Scalar>
struct NameDistributionSeq {
  Matrix<Scalar> rows;  // n x classes
  std::vector<int> face_ids;
};

/// One broadcast target per face of a frame whose speaker is in the cast.
struct TargetEntry {
  int face_id = 0;
  int frame_id = 0;
  Eigen::VectorXd target;
};

struct TargetSeq {
  std::vector<TargetEntry> entries;
  double epsilon = kDefaultEpsilon;
};

/// Row i = softmax(W2 relu(W1 f_i + b1) + b2), with faces as rows.
template <typename Scalar>
Matrix<Scalar> name_distributions(const Matrix<Scalar>& embeddings,
                                  const NamingParams<Scalar>& p) {
  if (embeddings.cols() != p.w1.rows()) {
    throw ShapeError("face embedding dimension " + std::to_string(embeddings.cols()) +
                     " does not match naming head input " + std::to_string(p.w1.rows()));
  }
  Matrix<Scalar> hidden = ((embeddings * p.w1).rowwise() + p.b1.row(0)).cwiseMax(Scalar(0));
  Matrix<Scalar> logits = (hidden * p.w2).rowwise() + p.b2.row(0);
  return softmax_rows_value(logits);
}

/// All faces of a clip, in frame then detection order.
Eigen::MatrixXd face_embeddings(const Clip& clip, std::vector<int>* face_ids = nullptr);

template <typename Scalar>
NameDistributionSeq<Scalar> predict_name_distributions(const Clip& clip,
                                                       const NamingParams<Scalar>& p) {
  NameDistributionSeq<Scalar> out;
  const Eigen::MatrixXd e = face_embeddings(clip, &out.face_ids);
  if (e.rows() == 0) {
    out.rows = Matrix<Scalar>::Zero(0, p.w2.cols());
    return out;
  }
  out.rows = name_distributions<Scalar>(e.cast<Scalar>(), p);
  return out;
}

/// Speaker of the subtitle line covering time t (latest t_start wins), or
/// nullptr when no line covers it.
const SubtitleLine* speaker_at(const Clip& clip, double t);

/// Smoothed one-hot of the speaker for every face in frames whose speaker is
/// a principal: (1 - eps) * onehot + eps / classes.
TargetSeq broadcast_targets(const Clip& clip, const CastList& cast,
                            double epsilon = kDefaultEpsilon);

/// Frames of a TargetSeq: face row indices into `face_ids` and the frame's
/// target. Faces absent from `face_ids` are skipped.
struct TargetFrame {
  std::vector<Eigen::Index> rows;
  Eigen::VectorXd target;
};
std::vector<TargetFrame> group_targets(const TargetSeq& targets, const std::vector<int>& face_ids);

/// sum_c p(c) ln(p(c) / g(c)), with 0 ln 0 = 0.
template <typename Scalar, typename DerivedP, typename DerivedG>
Scalar kl_divergence(const Eigen::MatrixBase<DerivedP>& p, const Eigen::MatrixBase<DerivedG>& g) {
  Scalar total = 0;
  for (Eigen::Index c = 0; c < p.size(); ++c) {
    const Scalar pc = p(c);
    if (pc <= Scalar(0)) continue;
    const Scalar gc = static_cast<Scalar>(g(c));
    if (gc <= Scalar(0)) return std::numeric_limits<Scalar>::infinity();
    total += pc * std::log(pc / gc);
  }
  return total;
}

/// Sum over frames of the minimum KL(p_j || g_l) over the frame's faces.
/// Throws NonFiniteLossError when a frame has no face with finite KL.
template <typename Scalar>
Scalar rkl_loss(const NameDistributionSeq<Scalar>& preds, const TargetSeq& targets) {
  Scalar total = 0;
  for (const auto& frame : group_targets(targets, preds.face_ids)) {
    Scalar best = std::numeric_limits<Scalar>::infinity();
    for (auto r : frame.rows) {
      best = std::min(best, kl_divergence<Scalar>(preds.rows.row(r), frame.target));
    }
    if (!std::isfinite(best)) {
      throw NonFiniteLossError(
          "multi-instance KL is not finite; smoothing epsilon must be positive when "
          "predictions put mass outside the target's support");
    }
    total += best;
  }
  return total;
}

/// Differentiable form of rkl_loss on a tape; the min is hard, so only the
/// winning face of each frame receives gradient.
template <typename Scalar>
Var<Scalar> rkl_loss(Var<Scalar> probs, const std::vector<int>& face_ids,
                     const TargetSeq& targets) {
  Tape<Scalar>& t = *probs.tape;
  const auto& p = probs.value();
  std::vector<std::pair<Eigen::Index, Eigen::VectorXd>> winners;
  Scalar total = 0;
  for (auto& frame : group_targets(targets, face_ids)) {
    Scalar best = std::numeric_limits<Scalar>::infinity();
    Eigen::Index arg = -1;
    for (auto r : frame.rows) {
      const Scalar kl = kl_divergence<Scalar>(p.row(r), frame.target);
      if (kl < best) {
        best = kl;
        arg = r;
      }
    }
    if (!std::isfinite(best)) {
      throw NonFiniteLossError("multi-instance KL is not finite; epsilon must be positive");
    }
    total += best;
    winners.emplace_back(arg, std::move(frame.target));
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = total;
  return t.custom(std::move(out), {probs}, [&t, probs, winners = std::move(winners)](int self) {
    const Scalar g = t.grad(self)(0, 0);
    const auto& p = t.value(probs);
    auto& gp = t.grad(probs.id);
    constexpr Scalar tiny = std::numeric_limits<Scalar>::min();
    for (const auto& [r, target] : winners) {
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        const Scalar pc = std::max(p(r, c), tiny);
        gp(r, c) += g * (std::log(pc) + Scalar(1) - std::log(static_cast<Scalar>(target(c))));
      }
    }
  });
}

/// Naming head on a tape: parameters by name "naming.w1", "naming.b1",
/// "naming.w2", "naming.b2".
template <typename Scalar>
Var<Scalar> name_distributions(Tape<Scalar>& t, const Matrix<Scalar>& embeddings) {
  auto x = t.constant(embeddings);
  auto h = relu(add_row(matmul(x, t.param("naming.w1")), t.param("naming.b1")));
  auto logits = add_row(matmul(h, t.param("naming.w2")), t.param("naming.b2"));
  return softmax_rows(logits);
}

/// Argmax class per row (ties to the lowest index); UNKNAME rows are left
/// out of the map.
template <typename Scalar>
FaceNames assign_names(const NameDistributionSeq<Scalar>& preds, const CastList& cast) {
  FaceNames out;
  for (Eigen::Index r = 0; r < preds.rows.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < preds.rows.cols(); ++c) {
      if (preds.rows(r, c) > preds.rows(r, best)) best = c;
    }
    if (best < cast.k()) out.emplace(preds.face_ids[static_cast<std::size_t>(r)], cast.names[best]);
  }
  return out;
}

/// Argmax class index per row, ties to the lowest index.
template <typename Scalar>
std::vector<int> argmax_rows(const Matrix<Scalar>& rows) {
  std::vector<int> out;
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < rows.cols(); ++c) {
      if (rows(r, c) > rows(r, best)) best = c;
    }
    out.push_back(static_cast<int>(best));
  }
  return out;
}

}  // namespace carn

#endif  // CARN_NAMING_HPP
