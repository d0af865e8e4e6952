#include "declutter/dataset.hpp"
#include "declutter/scene.hpp"

namespace declutter {

PosedImageSet synthesize_dataset(const SyntheticScene& scene, const CameraRig& rig, const SynthOptions& options) {
  scene.validate();
  rig.validate();
  PosedImageSet set;
  OracleRenderOptions render;
  render.samples_per_ray = options.samples_per_ray;
  for (std::size_t v = 0; v < rig.view_count(); ++v) {
    set.images.push_back(render_oracle(scene, rig, v, render));
    set.masks.push_back(occluder_mask(scene, rig, v));
  }
  set.intrinsics = rig.intrinsics;
  const bool perturb = options.rotation_noise_deg != 0.0 || options.translation_noise != 0.0;
  set.poses = perturb ? perturb_poses(rig, options.rotation_noise_deg, options.translation_noise, options.seed).poses
                      : rig.poses;
  set.near = scene.near;
  set.far = scene.far;
  set.holdout_indices = options.holdout_indices.value_or(default_holdout_indices(rig.view_count()));
  if (options.point_stride > 0) set.points = sample_point_cloud(scene, rig, options.point_stride);
  set.validate();
  return set;
}

}  // namespace declutter
