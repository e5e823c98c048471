// Library walk-through on a small synthetic scene: train briefly, predict the
// test views, localize with and without lines, print the eval rows.
//
//   localize_synthetic [iterations=2000]

#include <cstdio>
#include <cstdlib>

#include "pl2map/pl2map.hpp"

using namespace pl2map;

int main(int argc, char** argv) {
  const std::size_t iterations = argc > 1 ? std::size_t(std::atol(argv[1])) : 2000;

  SyntheticSpec spec;
  spec.train_views = 30;
  spec.test_views = 10;
  spec.points = 150;
  spec.lines = 30;
  spec.descriptor_dim = 32;
  const SceneDataset scene = generate_synthetic(spec);

  ModelConfig model;
  model.descriptor_dim = spec.descriptor_dim;
  model.line_tokens = spec.line_tokens;
  model.point_head = {128, 128};
  model.line_head = {128, 128};

  TrainConfig tc;
  tc.iterations = iterations;
  tc.log_every = std::max<std::size_t>(1, iterations / 5);
  Trainer trainer(scene, init_params<float>(model, 0), tc);
  TrainLog log;
  while (!trainer.done()) {
    const StepStats s = trainer.step();
    log.add(s);
    if ((s.iteration + 1) % tc.log_every == 0) std::fprintf(stderr, "%s\n", log.flush().c_str());
  }

  std::vector<PoseErrors> with_lines, points_only;
  const PoseErrors failed{INFINITY, INFINITY};
  for (std::size_t i : scene.indices(Split::test)) {
    const ImageRecord& im = scene.images[i];
    const auto corr = correspondences_from(predict(trainer.params(), im.descriptors, im.line_tokens), im);
    const auto a = localize(corr, scene.intrinsics(im), true);
    const auto b = localize(corr, scene.intrinsics(im), false);
    with_lines.push_back(a.success ? pose_errors(a.pose, im.pose) : failed);
    points_only.push_back(b.success ? pose_errors(b.pose, im.pose) : failed);
  }
  std::printf("points+lines  %s\n", format_eval_row(eval_metrics(with_lines)).c_str());
  std::printf("points only   %s\n", format_eval_row(eval_metrics(points_only)).c_str());
}
