#pragma once

// Contrastive losses over a projection batch P of shape [N, 2M, D]: for each
// patient, M original views followed by their M augmented views, so the view
// paired with index m is (m + M) mod 2M. Vectors are expected on the unit
// sphere. Logits are p_a . p_b / tau; every log-sum-exp subtracts its maximum.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "mmode/errors.hpp"
#include "mmode/tensor.hpp"

namespace mmode {

/// Raw is the sum exactly as written in the loss definitions; Mean divides by
/// the number of anchor terms (N*M for the patient-aware loss, 2*N*M for the
/// structure-aware loss) so the scale does not depend on batch size.
enum class Reduction { Raw, Mean };

struct ContrastiveConfig {
  double tau = 0.01;
  double alpha = 0.8;

  void validate() const {
    if (!(tau > 0.0)) throw ArgumentError("temperature tau must be positive");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ArgumentError("alpha must lie in [0, 1]");
  }
};

namespace detail {

struct BatchDims {
  std::size_t n, m, d;
};

template <class T>
BatchDims check_batch(const nn::Tensor<T>& p, double tau) {
  if (p.rank() != 3 || p.dim(1) % 2 != 0 || p.dim(1) == 0)
    throw ShapeError("projection batch must be [N, 2M, D], got " + nn::shape_str(p.shape()));
  if (!(tau > 0.0)) throw ArgumentError("temperature tau must be positive");
  return {p.dim(0), p.dim(1) / 2, p.dim(2)};
}

template <class T>
double dot(const T* a, const T* b, std::size_t d) {
  double s = 0;
  for (std::size_t k = 0; k < d; ++k) s += static_cast<double>(a[k]) * static_cast<double>(b[k]);
  return s;
}

/// One anchor row: candidates (row indices into P), positives (subset of
/// candidates, by position) and a weight per positive. Adds
/// weight * (lse(candidates) - logit(positive)) to the loss and the matching
/// logit gradient G[anchor, candidate] into `grad_pairs`.
struct PairGrad {
  std::size_t a, b;
  double g;
};

template <class T>
double anchor_terms(const T* P, std::size_t d, double tau, std::size_t anchor,
                    const std::vector<std::size_t>& cands,
                    const std::vector<std::size_t>& pos_slots, double pos_weight,
                    std::vector<double>& logits, std::vector<PairGrad>* grads) {
  logits.resize(cands.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < cands.size(); ++c) {
    logits[c] = dot(P + anchor * d, P + cands[c] * d, d) / tau;
    mx = std::max(mx, logits[c]);
  }
  double z = 0;
  for (double s : logits) z += std::exp(s - mx);
  const double lse = mx + std::log(z);
  double loss = 0;
  for (std::size_t slot : pos_slots) loss += pos_weight * (lse - logits[slot]);
  if (grads) {
    const double total_w = pos_weight * static_cast<double>(pos_slots.size());
    for (std::size_t c = 0; c < cands.size(); ++c) {
      const double soft = std::exp(logits[c] - lse);
      grads->push_back({anchor, cands[c], total_w * soft});
    }
    for (std::size_t slot : pos_slots) grads->push_back({anchor, cands[slot], -pos_weight});
  }
  return loss;
}

/// Wraps accumulated logit gradients into a scalar loss node over P.
template <class T>
nn::Tensor<T> contrastive_node(const nn::Tensor<T>& p, double value, std::vector<PairGrad> pairs,
                               double tau, double scale) {
  auto out = nn::detail::make_result<T>({1}, {&p});
  out->value[0] = static_cast<T>(value * scale);
  if (out->requires_grad) {
    nn::Node<T>* o = out.get();
    nn::Node<T>* in = p.node();
    const std::size_t d = p.dim(2);
    out->backward = [o, in, d, tau, scale, pairs = std::move(pairs)] {
      T* g = nn::detail::grad_of(in);
      if (!g) return;
      const double up = static_cast<double>(o->grad[0]) * scale / tau;
      const T* P = in->value.data();
      for (const auto& pg : pairs) {
        const double w = up * pg.g;
        for (std::size_t k = 0; k < d; ++k) {
          g[pg.a * d + k] += static_cast<T>(w * P[pg.b * d + k]);
          g[pg.b * d + k] += static_cast<T>(w * P[pg.a * d + k]);
        }
      }
    };
  }
  return nn::Tensor<T>(out);
}

}  // namespace detail

/// Patient-aware loss: anchors and positives are a patient's original views;
/// candidates are all original views in the batch except the anchor itself.
/// The whole sum is scaled by 1/(M-1).
template <class T>
nn::Tensor<T> patient_aware_loss(const nn::Tensor<T>& p, double tau,
                                 Reduction red = Reduction::Raw) {
  const auto [n, m, d] = detail::check_batch(p, tau);
  if (m < 2) throw ArgumentError("patient-aware loss needs M >= 2 original views");
  const T* P = p.data().data();
  const bool want_grad = p.requires_grad() && nn::grad_enabled();
  std::vector<detail::PairGrad> pairs;
  std::vector<double> logits;
  std::vector<std::size_t> cands, pos;
  const double w = 1.0 / static_cast<double>(m - 1);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < m; ++a) {
      const std::size_t anchor = i * 2 * m + a;
      cands.clear();
      pos.clear();
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < m; ++k) {
          const std::size_t row = j * 2 * m + k;
          if (row == anchor) continue;
          if (j == i) pos.push_back(cands.size());
          cands.push_back(row);
        }
      total += detail::anchor_terms(P, d, tau, anchor, cands, pos, w, logits,
                                    want_grad ? &pairs : nullptr);
    }
  const double scale = red == Reduction::Mean ? 1.0 / static_cast<double>(n * m) : 1.0;
  return detail::contrastive_node(p, total, std::move(pairs), tau, scale);
}

/// Structure-aware loss: every one of the 2M views of a patient is an anchor
/// whose positive is its paired view; candidates are that patient's other views.
template <class T>
nn::Tensor<T> structure_aware_loss(const nn::Tensor<T>& p, double tau,
                                   Reduction red = Reduction::Raw) {
  const auto [n, m, d] = detail::check_batch(p, tau);
  const T* P = p.data().data();
  const bool want_grad = p.requires_grad() && nn::grad_enabled();
  std::vector<detail::PairGrad> pairs;
  std::vector<double> logits;
  std::vector<std::size_t> cands, pos;
  double total = 0;
  const std::size_t views = 2 * m;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < views; ++a) {
      const std::size_t anchor = i * views + a;
      const std::size_t partner = i * views + (a + m) % views;
      cands.clear();
      pos.clear();
      for (std::size_t l = 0; l < views; ++l) {
        const std::size_t row = i * views + l;
        if (row == anchor) continue;
        if (row == partner) pos.push_back(cands.size());
        cands.push_back(row);
      }
      total += detail::anchor_terms(P, d, tau, anchor, cands, pos, 1.0, logits,
                                    want_grad ? &pairs : nullptr);
    }
  const double scale = red == Reduction::Mean ? 1.0 / static_cast<double>(n * views) : 1.0;
  return detail::contrastive_node(p, total, std::move(pairs), tau, scale);
}

/// alpha * patient-aware + (1 - alpha) * structure-aware. A zero-weighted term
/// is not evaluated, so alpha = 0 works for M = 1.
template <class T>
nn::Tensor<T> combined_cl_loss(const nn::Tensor<T>& p, const ContrastiveConfig& cfg,
                               Reduction red = Reduction::Raw) {
  cfg.validate();
  if (cfg.alpha == 1.0) return patient_aware_loss(p, cfg.tau, red);
  if (cfg.alpha == 0.0) return structure_aware_loss(p, cfg.tau, red);
  return nn::add(nn::scale(patient_aware_loss(p, cfg.tau, red), static_cast<T>(cfg.alpha)),
                 nn::scale(structure_aware_loss(p, cfg.tau, red), static_cast<T>(1.0 - cfg.alpha)));
}

/// Mean squared error regression loss on EF fractions.
template <class T>
nn::Tensor<T> regression_loss(const nn::Tensor<T>& pred, std::span<const T> target) {
  return nn::mse_loss(pred, target);
}

}  // namespace mmode
