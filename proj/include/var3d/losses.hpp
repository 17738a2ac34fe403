#pragma once

#include "var3d/renderer.hpp"

namespace var3d {

struct LossWeights {
  Scalar lambda_render = 1.0;
  Scalar lambda_vq = 1.0;
  Scalar lambda_gan = 0.025;
  Scalar lambda_mae = 1.0;
  Scalar lambda_ssim = 0.2;
  Scalar lambda_lpips = 0.8;
  Scalar beta = 0.25;      // commitment ratio
  Scalar lambda_gp = 10.0;
  Scalar lambda_l1 = 0.2;  // AR rendering supervision
  Scalar lambda_l2 = 8.0;
  Scalar gamma = 0.1;

  void validate() const;
};

// 10*log10(1/MSE) on [0,1] images; identical inputs return the 99 dB cap.
Scalar psnr(const Tensor& a, const Tensor& b);

// Windowed SSIM (11-tap gaussian window, k1=0.01, k2=0.03) on single-channel
// images; (H,W,3) inputs are channel-averaged first. Differentiable.
Tensor ssim_tensor(const Tensor& a, const Tensor& b);
Scalar ssim(const Tensor& a, const Tensor& b);

// Mean squared distance between the multi-layer features of a fixed,
// seed-initialized 3-layer strided conv stack; a deterministic stand-in for a
// learned perceptual metric. Inputs (H,W,3). Differentiable.
Tensor perceptual_proxy(const Tensor& a, const Tensor& b);

// Eq. of the stage-one rendering objective: weighted MAE/SSIM/perceptual rgb
// terms plus unit-weight masked-depth and silhouette MAE terms.
Tensor render_loss(const RenderedView& pred, const ViewRGBD& gt, const LossWeights& w);

// Critic interface used by the adversarial losses. input_gradient builds
// d(score)/d(images) as a graph over the critic parameters so that the
// gradient penalty trains them.
struct Critic {
  virtual ~Critic() = default;
  virtual Tensor score(const Tensor& images, bool detach_params) const = 0;  // (N,3,H,W)->(N)
  virtual Tensor input_gradient(const Tensor& images) const = 0;
};

// 4-layer strided-conv patch critic on rendered rgb.
class PatchCritic : public Critic {
 public:
  PatchCritic(ParamStore& ps, const std::string& prefix, int image_size, RngStream& rng);
  Tensor score(const Tensor& images, bool detach_params) const override;
  Tensor input_gradient(const Tensor& images) const override;

 private:
  struct Layer {
    Tensor w, b;
    int stride, pad;
  };
  std::vector<Layer> layers_;  // leaky-relu(0.2) between layers, mean over final map
};

// D(x) = <w, x> + b; analytic gradient-penalty fixture.
class LinearCritic : public Critic {
 public:
  LinearCritic(Tensor w, Tensor b) : w_(std::move(w)), b_(std::move(b)) {}
  Tensor score(const Tensor& images, bool detach_params) const override;
  Tensor input_gradient(const Tensor& images) const override;

 private:
  Tensor w_;  // (C*H*W)
  Tensor b_;  // (1)
};

// WGAN-GP critic objective; fake/real enter detached, interpolates use
// per-sample uniform epsilon drawn from `seed`.
Tensor critic_loss(const Tensor& real, const Tensor& fake, const Critic& critic, Scalar lambda_gp,
                   uint64_t seed);

// -E[D(fake)] with critic parameters detached.
Tensor generator_adv_loss(const Tensor& fake, const Critic& critic);

Tensor vqvae_total_loss(const Tensor& render_l, const Tensor& vq_l, const Tensor& gen_adv,
                        const LossWeights& w);

}  // namespace var3d
