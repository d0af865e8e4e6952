#pragma once

#include "declutter/camera.hpp"
#include "declutter/dataset.hpp"
#include "declutter/field.hpp"
#include "declutter/losses.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace declutter {

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

struct GradcheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Central differences of `loss` at x over the listed coordinates, compared
/// with the analytic gradient. Order 2 uses (f(x+e) - f(x-e)) / 2e; order 4
/// adds the +-2e points of the five-point stencil.
GradcheckResult check_gradient(const std::function<double(std::span<const double>)>& loss,
                               std::span<const double> x, std::span<const double> analytic,
                               std::span<const std::size_t> indices, double eps, int order = 4);

/// A small ray batch with everything needed to evaluate the training loss in double.
struct GradcheckProblem {
  FieldConfig field;
  std::vector<double> field_params;
  CameraState camera;
  std::vector<double> camera_params;
  std::vector<PixelRef> pixels;
  std::vector<Image> images;
  std::vector<Mask> masks;
  std::vector<double> depths;  // rays x samples, fixed
  int samples = 16;
  double far = 1.0;
  long t = 0;
  ScheduleState schedule;
  S3IMConfig s3im;
  LossTerms terms;
  bool camera_terms = true;  // mode with camera learning
  std::uint64_t seed = 0;
};

/// Three-view 16x16 synthetic problem with up to `rays` rays, N samples and a
/// small MLP; t is placed past the camera gate with all loss terms active.
GradcheckProblem make_toy_problem(int rays = 64, int samples = 16, std::uint64_t seed = 0);

/// Builds a problem from a dataset and field configuration.
GradcheckProblem make_problem(const PosedImageSet& set, const FieldConfig& field, int rays, int samples,
                              std::uint64_t seed);

/// Loss at (field params | camera params) concatenated; fills the analytic
/// gradient when `grad` is non-null. Camera entries are zero when gated.
double problem_loss(const GradcheckProblem& p, std::span<const double> flat, std::vector<double>* grad,
                    std::vector<std::uint8_t>* relu_pattern = nullptr);

/// Like check_gradient, but when a stencil point flips any ReLU unit relative
/// to x the step shrinks tenfold (up to five times), since the loss is not
/// differentiable across that boundary. `shrunk` counts affected coordinates.
GradcheckResult check_gradient_kink_aware(const GradcheckProblem& p, std::span<const double> x,
                                         std::span<const double> analytic, std::span<const std::size_t> indices,
                                         double eps, int order, std::size_t* shrunk = nullptr);

struct GradientCheckReport {
  GradcheckResult field;
  GradcheckResult camera;
  double max_relative_error = 0.0;
  bool gated_camera_zero = false;  // analytic camera gradient is exactly zero for t < t_c
  std::size_t kink_shrunk = 0;     // coordinates checked with a reduced step
};

/// Checks a seeded random subset of field parameters plus the camera
/// parameters of the batch's views; at least `min_params` in total.
GradientCheckReport gradient_check(const GradcheckProblem& p, double eps = 1e-4, std::size_t min_params = 50,
                                   int order = 4);

}  // namespace declutter
