#include "var3d/losses.hpp"

#include <cmath>

namespace var3d {

void LossWeights::validate() const {
  for (Scalar v : {lambda_render, lambda_vq, lambda_gan, lambda_mae, lambda_ssim, lambda_lpips,
                   beta, lambda_gp, lambda_l1, lambda_l2, gamma})
    check_arg(std::isfinite(v) && v >= 0, "loss weights must be finite and >= 0");
}

Scalar psnr(const Tensor& a, const Tensor& b) {
  check_arg(a.shape() == b.shape(), "psnr: shape mismatch");
  Scalar mse = (a.value() - b.value()).square().mean();
  if (mse <= 0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

namespace {

constexpr int kSsimWindow = 11;
constexpr Scalar kSsimC1 = 0.01 * 0.01;
constexpr Scalar kSsimC2 = 0.03 * 0.03;

Tensor gaussian_window() {
  static ArrayX w = [] {
    const Scalar sigma = 1.5;
    ArrayX g(kSsimWindow * kSsimWindow);
    Scalar total = 0;
    for (int y = 0; y < kSsimWindow; ++y)
      for (int x = 0; x < kSsimWindow; ++x) {
        Scalar dy = y - (kSsimWindow - 1) / 2.0, dx = x - (kSsimWindow - 1) / 2.0;
        Scalar v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
        g[y * kSsimWindow + x] = v;
        total += v;
      }
    g /= total;
    return g;
  }();
  return Tensor::from({1, 1, kSsimWindow, kSsimWindow}, ArrayX(w));
}

Tensor to_gray_nchw(const Tensor& img) {
  if (img.rank() == 3 && img.dim(2) == 3)
    return reshape(mean_axis(img, 2), {1, 1, img.dim(0), img.dim(1)});
  check_arg(img.rank() == 2, "ssim: expects (H,W) or (H,W,3)");
  return reshape(img, {1, 1, img.dim(0), img.dim(1)});
}

}  // namespace

Tensor ssim_tensor(const Tensor& a, const Tensor& b) {
  check_arg(a.shape() == b.shape(), "ssim: shape mismatch");
  Tensor x = to_gray_nchw(a), y = to_gray_nchw(b);
  check_arg(x.dim(2) >= kSsimWindow && x.dim(3) >= kSsimWindow,
            "ssim: image smaller than the 11x11 window");
  Tensor g = gaussian_window();
  Tensor none;
  auto blur = [&](const Tensor& t) { return conv2d(t, g, none, 1, 0); };
  Tensor mu_x = blur(x), mu_y = blur(y);
  Tensor mu_xx = mu_x * mu_x, mu_yy = mu_y * mu_y, mu_xy = mu_x * mu_y;
  Tensor sigma_x = blur(x * x) - mu_xx;
  Tensor sigma_y = blur(y * y) - mu_yy;
  Tensor sigma_xy = blur(x * y) - mu_xy;
  Tensor num = (2.0 * mu_xy + kSsimC1) * (2.0 * sigma_xy + kSsimC2);
  Tensor den = (mu_xx + mu_yy + kSsimC1) * (sigma_x + sigma_y + kSsimC2);
  return mean(num / den);
}

Scalar ssim(const Tensor& a, const Tensor& b) {
  NoGradGuard off;
  return ssim_tensor(a, b).item();
}

namespace {

// Fixed random feature stack for the perceptual proxy; weights are constants.
struct ProxyStack {
  std::vector<Tensor> weights;  // (O,C,3,3)
  ProxyStack() {
    RngStream rng(mix_seed(0x7a31dbeef001ull, "perceptual-proxy"));
    int chans[4] = {3, 12, 24, 32};
    for (int l = 0; l < 3; ++l) {
      Scalar stddev = 1.0 / std::sqrt(static_cast<Scalar>(chans[l] * 9));
      weights.push_back(Tensor::randn({chans[l + 1], chans[l], 3, 3}, rng, stddev));
    }
  }
  std::vector<Tensor> features(const Tensor& img_hw3) const {
    Tensor x = reshape(permute(img_hw3, {2, 0, 1}),
                       {1, 3, img_hw3.dim(0), img_hw3.dim(1)});
    std::vector<Tensor> feats;
    Tensor none;
    for (const Tensor& w : weights) {
      x = silu(conv2d(x, w, none, 2, 1));
      feats.push_back(x);
    }
    return feats;
  }
};

const ProxyStack& proxy_stack() {
  static ProxyStack stack;
  return stack;
}

}  // namespace

Tensor perceptual_proxy(const Tensor& a, const Tensor& b) {
  check_arg(a.shape() == b.shape(), "perceptual_proxy: shape mismatch");
  check_arg(a.rank() == 3 && a.dim(2) == 3, "perceptual_proxy: expects (H,W,3)");
  auto fa = proxy_stack().features(a);
  auto fb = proxy_stack().features(b);
  Tensor total;
  for (size_t l = 0; l < fa.size(); ++l) {
    Tensor d = mean(square(fa[l] - fb[l]));
    total = total.defined() ? total + d : d;
  }
  return total;
}

Tensor render_loss(const RenderedView& pred, const ViewRGBD& gt, const LossWeights& w) {
  Tensor rgb_gt = to_tensor(gt.rgb);
  Tensor depth_gt = to_tensor(gt.depth);
  Tensor mask_gt = to_tensor(gt.mask);
  check_arg(pred.rgb.shape() == rgb_gt.shape(), "render_loss: resolution mismatch");

  Tensor total = Tensor::scalar(0.0);
  if (w.lambda_mae > 0) total = total + w.lambda_mae * mean(abs(pred.rgb - rgb_gt));
  if (w.lambda_ssim > 0) total = total + w.lambda_ssim * (-ssim_tensor(pred.rgb, rgb_gt) + 1.0);
  if (w.lambda_lpips > 0) total = total + w.lambda_lpips * perceptual_proxy(pred.rgb, rgb_gt);

  // depth supervised only where the ground truth hits geometry
  Scalar hits = mask_gt.value().sum();
  if (hits > 0) {
    Tensor masked = abs(pred.depth - depth_gt) * mask_gt;
    total = total + sum(masked) * (1.0 / hits);
  }
  total = total + mean(abs(pred.mask - mask_gt));
  return total;
}

// ---------------------------------------------------------------------------
// critics
// ---------------------------------------------------------------------------

PatchCritic::PatchCritic(ParamStore& ps, const std::string& prefix, int image_size,
                         RngStream& rng) {
  check_arg(image_size >= 16, "critic: image too small");
  int chans[4] = {3, 32, 64, 128};
  for (int l = 0; l < 3; ++l) {
    Scalar stddev = 1.0 / std::sqrt(static_cast<Scalar>(chans[l] * 16));
    Layer layer;
    layer.w = ps.create_randn(prefix + ".conv" + std::to_string(l) + ".w",
                              {chans[l + 1], chans[l], 4, 4}, rng, stddev);
    layer.b = ps.create_zeros(prefix + ".conv" + std::to_string(l) + ".b", {chans[l + 1]});
    layer.stride = 2;
    layer.pad = 1;
    layers_.push_back(layer);
  }
  Layer head;
  head.w = ps.create_randn(prefix + ".head.w", {1, 128, 3, 3}, rng, 1.0 / std::sqrt(128.0 * 9));
  head.b = ps.create_zeros(prefix + ".head.b", {1});
  head.stride = 1;
  head.pad = 1;
  layers_.push_back(head);
}

Tensor PatchCritic::score(const Tensor& images, bool detach_params) const {
  check_arg(images.rank() == 4 && images.dim(1) == 3, "critic: expects (N,3,H,W)");
  Tensor x = images;
  for (size_t l = 0; l < layers_.size(); ++l) {
    Tensor w = detach_params ? detach(layers_[l].w) : layers_[l].w;
    Tensor b = detach_params ? detach(layers_[l].b) : layers_[l].b;
    x = conv2d(x, w, b, layers_[l].stride, layers_[l].pad);
    if (l + 1 < layers_.size()) x = leaky_relu(x, 0.2);
  }
  // mean over the patch map per sample
  long N = x.dim(0);
  return reshape(mean_axis(reshape(x, {static_cast<int>(N), -1}), 1), {static_cast<int>(N)});
}

Tensor PatchCritic::input_gradient(const Tensor& images) const {
  check_arg(images.rank() == 4 && images.dim(1) == 3, "critic: expects (N,3,H,W)");
  // forward, recording pre-activation masks (piecewise-constant, detached)
  std::vector<Tensor> masks;
  Tensor x = images;
  {
    NoGradGuard off;
    for (size_t l = 0; l + 1 < layers_.size(); ++l) {
      x = conv2d(x, layers_[l].w, layers_[l].b, layers_[l].stride, layers_[l].pad);
      ArrayX m(x.numel());
      for (long i = 0; i < m.size(); ++i) m[i] = x.value()[i] > 0 ? 1.0 : 0.2;
      masks.push_back(Tensor::from(x.shape(), std::move(m)));
      x = leaky_relu(x, 0.2);
    }
    x = conv2d(x, layers_.back().w, layers_.back().b, layers_.back().stride, layers_.back().pad);
  }
  // pull d(score)/d(map) = 1/(map size) back through the transposed stack
  long N = images.dim(0);
  long map_elems = x.numel() / N;
  Tensor g = Tensor::full(x.shape(), 1.0 / static_cast<Scalar>(map_elems));
  Tensor none;
  g = conv_transpose2d(g, layers_.back().w, none, layers_.back().stride, layers_.back().pad);
  for (size_t l = layers_.size() - 1; l-- > 0;) {
    g = g * masks[l];
    g = conv_transpose2d(g, layers_[l].w, none, layers_[l].stride, layers_[l].pad);
  }
  return g;
}

Tensor LinearCritic::score(const Tensor& images, bool detach_params) const {
  long N = images.dim(0);
  Tensor flat = reshape(images, {static_cast<int>(N), -1});
  Tensor w = detach_params ? detach(w_) : w_;
  Tensor b = detach_params ? detach(b_) : b_;
  return reshape(matmul(flat, reshape(w, {static_cast<int>(w_.numel()), 1})),
                 {static_cast<int>(N)}) +
         b;
}

Tensor LinearCritic::input_gradient(const Tensor& images) const {
  Tensor zero = Tensor::zeros(images.shape());
  Shape ws{1, images.dim(1), images.dim(2), images.dim(3)};
  return zero + reshape(w_, std::move(ws));
}

Tensor critic_loss(const Tensor& real, const Tensor& fake, const Critic& critic, Scalar lambda_gp,
                   uint64_t seed) {
  check_arg(real.shape() == fake.shape(), "critic_loss: batch shapes differ");
  Tensor real_c = detach(real);
  Tensor fake_c = detach(fake);
  Tensor wasserstein = mean(critic.score(fake_c, false)) - mean(critic.score(real_c, false));
  if (lambda_gp <= 0) return wasserstein;

  long N = real.dim(0);
  RngStream rng(mix_seed(seed, "wgan.eps"));
  ArrayX mixed(real.numel());
  long per = real.numel() / N;
  for (long n = 0; n < N; ++n) {
    Scalar eps = rng.uniform();
    for (long i = 0; i < per; ++i)
      mixed[n * per + i] = eps * real.value()[n * per + i] + (1 - eps) * fake.value()[n * per + i];
  }
  Tensor interp = Tensor::from(real.shape(), std::move(mixed));
  Tensor g = critic.input_gradient(interp);  // (N,3,H,W), graph over critic params
  Tensor norms = sqrt(sum_axis(square(reshape(g, {static_cast<int>(N), -1})), 1) + 1e-12);
  Tensor penalty = mean(square(norms - 1.0));
  return wasserstein + lambda_gp * penalty;
}

Tensor generator_adv_loss(const Tensor& fake, const Critic& critic) {
  return -mean(critic.score(fake, true));
}

Tensor vqvae_total_loss(const Tensor& render_l, const Tensor& vq_l, const Tensor& gen_adv,
                        const LossWeights& w) {
  Tensor total = w.lambda_render * render_l + w.lambda_vq * vq_l;
  if (gen_adv.defined() && w.lambda_gan > 0) total = total + w.lambda_gan * gen_adv;
  return total;
}

}  // namespace var3d
