#ifndef CARN_LAYERS_HPP
#define CARN_LAYERS_HPP

// Transformer building blocks on the autodiff tape. Parameters are looked
// up by name under a block prefix, e.g. "enc.l0.wq".

#include <cmath>
#include <string>
#include <vector>

#include "carn/autodiff.hpp"

namespace carn {

/// softmax(Q K^T / sqrt(d_h)) K, keys doubling as values. Masked keys get
/// zero weight.
template <typename Scalar>
Matrix<Scalar> attention_value(const Matrix<Scalar>& q, const Matrix<Scalar>& k,
                               const Mask& key_mask = {}) {
  if (q.cols() != k.cols()) throw ShapeError("attention: query/key widths differ");
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(q.cols()));
  return softmax_rows_value<Scalar>((q * k.transpose()) * scale, key_mask) * k;
}

template <typename Scalar>
Var<Scalar> attention(Var<Scalar> q, Var<Scalar> k, const Mask& key_mask = {}) {
  if (q.cols() != k.cols()) throw ShapeError("attention: query/key widths differ");
  const Scalar s = Scalar(1) / std::sqrt(static_cast<Scalar>(q.cols()));
  auto weights = softmax_rows(scale(matmul_nt(q, k), s), key_mask);
  return matmul(weights, k);
}

/// Heads split the projected queries/keys column-wise; outputs are
/// concatenated back to d_model.
template <typename Scalar>
Var<Scalar> multi_head_attention(Var<Scalar> x, Var<Scalar> ctx, const std::string& prefix,
                                 int heads, const Mask& ctx_mask) {
  Tape<Scalar>& t = *x.tape;
  auto q = matmul(x, t.param(prefix + ".wq"));
  auto k = matmul(ctx, t.param(prefix + ".wk"));
  const Eigen::Index d = q.cols();
  if (d % heads != 0) throw ShapeError("model width is not divisible by the head count");
  const Eigen::Index dh = d / heads;
  std::vector<Var<Scalar>> outs;
  for (int h = 0; h < heads; ++h) {
    outs.push_back(attention(slice_cols(q, h * dh, dh), slice_cols(k, h * dh, dh), ctx_mask));
  }
  return heads == 1 ? outs[0] : concat_cols<Scalar>(outs);
}

template <typename Scalar>
Var<Scalar> norm(Var<Scalar> x, const std::string& prefix) {
  Tape<Scalar>& t = *x.tape;
  return layer_norm(x, t.param(prefix + ".g"), t.param(prefix + ".b"));
}

/// Two linear layers with ReLU in between.
template <typename Scalar>
Var<Scalar> feed_forward(Var<Scalar> x, const std::string& prefix) {
  Tape<Scalar>& t = *x.tape;
  auto h = relu(add_row(matmul(x, t.param(prefix + ".w1")), t.param(prefix + ".b1")));
  return add_row(matmul(h, t.param(prefix + ".w2")), t.param(prefix + ".b2"));
}

/// Pre-norm block. With `ctx` invalid it is self-attention, otherwise
/// queries come from x and keys from the (normalized) context.
template <typename Scalar>
Var<Scalar> transformer_block(Var<Scalar> x, Var<Scalar> ctx, const std::string& prefix,
                              int heads, const Mask& key_mask) {
  auto xn = norm(x, prefix + ".ln1");
  auto cn = ctx.valid() ? norm(ctx, prefix + ".lnc") : xn;
  x = x + multi_head_attention(xn, cn, prefix + ".att", heads, key_mask);
  return x + feed_forward(norm(x, prefix + ".ln2"), prefix + ".ff");
}

inline bool any_valid(const Mask& mask, Eigen::Index rows) {
  if (mask.empty()) return rows > 0;
  for (char m : mask) {
    if (m) return true;
  }
  return false;
}

/// Self-attention encoder; output length equals input length.
template <typename Scalar>
Var<Scalar> encode(Var<Scalar> x, const std::string& prefix, int layers, int heads,
                   const Mask& mask = {}) {
  if (!any_valid(mask, x.rows())) throw EmptyInputError("encode: empty input sequence");
  for (int l = 0; l < layers; ++l) {
    x = transformer_block(x, Var<Scalar>{}, prefix + ".l" + std::to_string(l), heads, mask);
  }
  return norm(x, prefix + ".ln_f");
}

/// Co-attention decoder: queries from `input`, keys/values from `context`.
/// An empty context passes the input through unchanged and sets `*skipped`.
template <typename Scalar>
Var<Scalar> co_attend(Var<Scalar> input, Var<Scalar> context, const std::string& prefix,
                      int layers, int heads, const Mask& context_mask = {},
                      bool* skipped = nullptr) {
  if (!context.valid() || !any_valid(context_mask, context.rows())) {
    if (skipped) *skipped = true;
    return input;
  }
  if (skipped) *skipped = false;
  for (int l = 0; l < layers; ++l) {
    input = transformer_block(input, context, prefix + ".l" + std::to_string(l), heads,
                              context_mask);
  }
  return norm(input, prefix + ".ln_f");
}

/// Sinusoidal position table, rows = positions.
template <typename Scalar>
Matrix<Scalar> positional_encoding(Eigen::Index length, Eigen::Index width) {
  Matrix<Scalar> pe(length, width);
  for (Eigen::Index pos = 0; pos < length; ++pos) {
    for (Eigen::Index i = 0; i < width; ++i) {
      const Scalar rate = std::pow(Scalar(10000), -static_cast<Scalar>(2 * (i / 2)) /
                                                      static_cast<Scalar>(width));
      const Scalar a = static_cast<Scalar>(pos) * rate;
      pe(pos, i) = (i % 2 == 0) ? std::sin(a) : std::cos(a);
    }
  }
  return pe;
}

}  // namespace carn

#endif  // CARN_LAYERS_HPP
