// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lorasr/lora.hpp"
#include "lorasr/network.hpp"
#include "lorasr/ops.hpp"

namespace lorasr {

struct LossWeights {
  double lambda1 = 1.0;   // reconstruction
  double lambda2 = 0.1;   // teacher-student pixel term
  double lambda3 = 0.01;  // feature term
};

/// Intermediate-feature term of the objective.
enum class FeatureLoss {
  Affinity,   // spatial affinity matching
  L1Aligned,  // L1 after a learned 1x1 channel alignment
  None,
};

inline double total_loss(double rec, double ts, double ad, const LossWeights& w) {
  return w.lambda1 * rec + w.lambda2 * ts + w.lambda3 * ad;
}

template <typename Scalar>
Var<Scalar> total_loss(const Var<Scalar>& rec, const Var<Scalar>& ts, const Var<Scalar>& ad, const LossWeights& w) {
  return add(add(scale(rec, static_cast<Scalar>(w.lambda1)), scale(ts, static_cast<Scalar>(w.lambda2))),
             scale(ad, static_cast<Scalar>(w.lambda3)));
}

/// Mean over layers of mean |A_S - A_T|. Teacher taps enter as constants.
template <typename Scalar>
Var<Scalar> affinity_distill_loss(const std::vector<Var<Scalar>>& student_taps,
                                  const std::vector<Tensor<Scalar>>& teacher_taps) {
  if (student_taps.empty() || student_taps.size() != teacher_taps.size())
    throw ShapeError("affinity_distill_loss: " + std::to_string(student_taps.size()) + " student taps vs " +
                     std::to_string(teacher_taps.size()) + " teacher taps");
  Tape<Scalar>& tape = tape_of(student_taps.front());
  Var<Scalar> acc;
  for (std::size_t l = 0; l < student_taps.size(); ++l) {
    const Shape& s = student_taps[l].shape();
    const Shape& t = teacher_taps[l].shape();
    if (s.size() != 4 || t.size() != 4 || s[0] != t[0] || s[2] != t[2] || s[3] != t[3])
      throw ShapeError("affinity_distill_loss: layer " + std::to_string(l) + " student tap " + shape_string(s) +
                       " and teacher tap " + shape_string(t) + " differ in batch or spatial dims");
    const Var<Scalar> term =
        mean_abs_diff(spatial_affinity(student_taps[l]), spatial_affinity(tape.constant(teacher_taps[l])));
    acc = acc.valid() ? add(acc, term) : term;
  }
  return scale(acc, Scalar(1) / static_cast<Scalar>(student_taps.size()));
}

/// Mean absolute error between teacher and student outputs.
template <typename Scalar>
Var<Scalar> pixel_distill_loss(const Tensor<Scalar>& teacher_out, const Var<Scalar>& student_out) {
  require_same_shape(teacher_out.shape(), student_out.shape(), "pixel_distill_loss");
  return mean_abs_diff(student_out, tape_of(student_out).constant(teacher_out));
}

/// Mean squared error against the ground-truth HR image.
template <typename Scalar>
Var<Scalar> reconstruction_loss(const Tensor<Scalar>& hr, const Var<Scalar>& student_out) {
  require_same_shape(hr.shape(), student_out.shape(), "reconstruction_loss");
  return mean_squared_error(student_out, tape_of(student_out).constant(hr));
}

/// 1x1 convolutions mapping student channels to teacher channels, one per tap.
template <typename Scalar>
struct ChannelAligners {
  std::vector<ConvParams<Scalar>> convs;

  static std::string name(std::size_t l) { return "aligner_" + std::to_string(l + 1); }

  static ChannelAligners make(std::size_t taps, Index student_channels, Index teacher_channels, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ChannelAligners out;
    const Scalar stddev = static_cast<Scalar>(std::sqrt(1.0 / static_cast<double>(student_channels)));
    for (std::size_t l = 0; l < taps; ++l)
      out.convs.push_back({Tensor<Scalar>::normal({teacher_channels, student_channels, 1, 1}, rng, Scalar(0), stddev),
                           Tensor<Scalar>::zeros({teacher_channels})});
    return out;
  }
};

/// (1/n) sum_l mean |F_T - psi_l(F_S)|, aligners differentiable.
template <typename Scalar>
Var<Scalar> l1_feature_loss_ablation(const std::vector<Var<Scalar>>& student_taps,
                                     const std::vector<Tensor<Scalar>>& teacher_taps,
                                     const ChannelAligners<Scalar>& aligners, bool train_aligners = true) {
  if (student_taps.empty() || student_taps.size() != teacher_taps.size() ||
      aligners.convs.size() != student_taps.size())
    throw ShapeError("l1_feature_loss_ablation: tap/aligner counts differ (" + std::to_string(student_taps.size()) +
                     ", " + std::to_string(teacher_taps.size()) + ", " + std::to_string(aligners.convs.size()) + ")");
  Tape<Scalar>& tape = tape_of(student_taps.front());
  Var<Scalar> acc;
  for (std::size_t l = 0; l < student_taps.size(); ++l) {
    const auto& a = aligners.convs[l];
    const std::string n = ChannelAligners<Scalar>::name(l);
    Var<Scalar> bias;
    if (a.bias) bias = tape.parameter(n + ".bias", *a.bias, train_aligners);
    const Var<Scalar> aligned =
        conv2d(student_taps[l], tape.parameter(n + ".kernel", a.kernel, train_aligners), bias, 0);
    if (aligned.shape() != teacher_taps[l].shape())
      throw ShapeError("l1_feature_loss_ablation: layer " + std::to_string(l) + " aligned student " +
                       shape_string(aligned.shape()) + " vs teacher " + shape_string(teacher_taps[l].shape()));
    const Var<Scalar> term = mean_abs_diff(aligned, tape.constant(teacher_taps[l]));
    acc = acc.valid() ? add(acc, term) : term;
  }
  return scale(acc, Scalar(1) / static_cast<Scalar>(student_taps.size()));
}

template <typename Scalar>
struct DistillTerms {
  Var<Scalar> reconstruction;
  Var<Scalar> pixel;
  Var<Scalar> feature;
  Var<Scalar> total;
};

/// Full objective for one batch: student forward on the tape, teacher
/// results precomputed without recording.
template <typename Scalar>
DistillTerms<Scalar> distillation_objective(const ForwardResult<Scalar>& student, const Inference<Scalar>& teacher,
                                            const Tensor<Scalar>& hr, const LossWeights& weights,
                                            FeatureLoss feature_loss,
                                            const ChannelAligners<Scalar>* aligners = nullptr) {
  Tape<Scalar>& tape = tape_of(student.output);
  DistillTerms<Scalar> t;
  t.reconstruction = reconstruction_loss(hr, student.output);
  t.pixel = pixel_distill_loss(teacher.output, student.output);
  switch (feature_loss) {
    case FeatureLoss::Affinity:
      t.feature = affinity_distill_loss(student.taps, teacher.taps);
      break;
    case FeatureLoss::L1Aligned:
      if (!aligners) throw ConfigError("l1_aligned feature loss requires channel aligners");
      t.feature = l1_feature_loss_ablation(student.taps, teacher.taps, *aligners);
      break;
    case FeatureLoss::None:
      t.feature = tape.constant(Tensor<Scalar>::scalar(0));
      break;
  }
  t.total = total_loss(t.reconstruction, t.pixel, t.feature, weights);
  return t;
}

}  // namespace lorasr
