// Renders a generated scene from its first camera, backpropagates the
// photometric loss against a shifted target, and writes both images.

#include <cstdio>

#include "skipgs/skipgs.hpp"

int main(int argc, char** argv) {
  const char* out = argc > 1 ? argv[1] : "render.ppm";
  skipgs::SceneSpec spec;
  spec.seed = 3;
  const auto g = skipgs::generate_scene(spec);
  const auto init = skipgs::init_training_scene(spec, g.gt);

  const auto& cam = g.cams[0];
  const auto fwd = skipgs::render(init, cam);
  const skipgs::PhotometricLoss<float> loss(fwd.image, g.targets[0]);
  const auto grads = skipgs::render_backward(init, cam, fwd, loss.gradient());

  double sum = 0;
  for (const auto& p : grads.params)
    for (float v : p) sum += static_cast<double>(v) * v;
  std::printf("%zu Gaussians, loss %.5f, psnr %.2f dB, |grad| %.4g\n", init.size(), static_cast<double>(loss.value()),
              skipgs::psnr(fwd.image, g.targets[0]), std::sqrt(sum));
  skipgs::write_ppm(out, fwd.image);
  std::printf("wrote %s\n", out);
  return 0;
}
