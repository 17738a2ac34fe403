#include "var3d/pipeline.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "var3d/losses.hpp"

namespace fs = std::filesystem;

namespace var3d {

namespace {

constexpr uint64_t kCanonicalCameraSeed = 1234567;

struct TrainLog {
  std::ofstream f;
  explicit TrainLog(const std::string& path) : f(path, std::ios::app) {
    if (!f) throw IOError("cannot open log: " + path);
  }
  void scalar(int64_t step, const std::string& name, Scalar v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    f << step << " " << name << " " << buf << "\n";
    f.flush();
  }
  void text(const std::string& line) {
    f << "# " << line << "\n";
    f.flush();
  }
};

void apply_threads(const RunConfig& cfg) { Eigen::setNbThreads(cfg.threads); }

void echo_config(const RunConfig& cfg, TrainLog& log) {
  log.text("config " + to_json(cfg).dump());
}

Scalar lr_at(const TrainSection& t, const std::string& schedule, int64_t step, int64_t total) {
  if (schedule == "linear-decay")
    return t.lr * (1.0 - static_cast<Scalar>(step) / static_cast<Scalar>(total));
  return t.lr;
}

std::vector<int> pick_batch(uint64_t seed, int64_t step, int n, int batch) {
  RngStream rng(mix_seed(seed, "batch", static_cast<uint64_t>(step)));
  std::vector<int> out(static_cast<size_t>(batch));
  for (auto& v : out) v = rng.uniform_int(0, n - 1);
  return out;
}

Tensor stack_images_nchw(const std::vector<Tensor>& hw3_images) {
  std::vector<Tensor> items;
  for (const Tensor& img : hw3_images)
    items.push_back(reshape(permute(img, {2, 0, 1}), {1, 3, img.dim(0), img.dim(1)}));
  return items.size() == 1 ? items[0] : concat(items, 0);
}

struct UsageSnapshot {
  std::vector<int64_t> usage, stale;
  std::vector<bool> used;
  explicit UsageSnapshot(const Codebook& cb)
      : usage(cb.usage), stale(cb.stale), used(cb.used_this_step) {}
  void restore(Codebook& cb) const {
    cb.usage = usage;
    cb.stale = stale;
    cb.used_this_step = used;
  }
};

// Reconstruction PSNR over every view of the given assets, plus dataset-wide
// codebook utilization; leaves usage bookkeeping untouched.
std::pair<Scalar, Scalar> validate_recon(VqvaeBundle& vq,
                                         const std::vector<MultiViewSample>& samples,
                                         int val_assets) {
  NoGradGuard off;
  UsageSnapshot snap(*vq.codebook);
  Scalar psnr_total = 0;
  long views = 0;
  int n_val = std::min<int>(val_assets, static_cast<int>(samples.size()));
  if (n_val <= 0) n_val = static_cast<int>(samples.size());
  for (int a = 0; a < n_val; ++a) {
    const auto& s = samples[static_cast<size_t>(a)];
    Tensor f = vq.encoder->encode(s);
    auto qr = quantize_multiscale(f, vq.schedule, *vq.codebook);
    TriplaneField field = vq.decoder->decode_field(qr.fhat);
    for (const auto& view : s.views) {
      RenderedView rv = volume_render(field, view.camera, view.rgb.h, view.rgb.w, vq.rcfg);
      psnr_total += psnr(rv.rgb, to_tensor(view.rgb));
      ++views;
    }
  }
  // utilization over a full tokenization pass of the dataset
  vq.codebook->reset_usage();
  for (const auto& s : samples) {
    Tensor f = vq.encoder->encode(s);
    quantize_multiscale(f, vq.schedule, *vq.codebook);
  }
  Scalar util = codebook_health(*vq.codebook).utilization;
  snap.restore(*vq.codebook);
  return {psnr_total / static_cast<Scalar>(views), util};
}

}  // namespace

std::unique_ptr<VqvaeBundle> VqvaeBundle::build(const RunConfig& cfg) {
  auto b = std::make_unique<VqvaeBundle>();
  RngStream rng(mix_seed(cfg.seed, "init.vqvae"));
  b->encoder = std::make_unique<MultiViewEncoder>(b->ps, "encoder", cfg.encoder_config(), rng);
  b->codebook = std::make_unique<Codebook>(b->ps, "codebook", cfg.vqvae.codebook_size,
                                           cfg.vqvae.dq, rng);
  b->decoder = std::make_unique<TriplaneDecoder>(b->ps, "decoder", cfg.decoder_config(), rng);
  b->schedule = cfg.scale_schedule();
  b->rcfg = cfg.render_config();
  return b;
}

void VqvaeBundle::load(const Checkpoint& ck) {
  ck.load_params("vqvae", ps);
  if (ck.has("codebook_usage")) {
    const ArrayX& u = ck.get("codebook_usage").second;
    const ArrayX& st = ck.get("codebook_stale").second;
    for (long v = 0; v < u.size() && v < codebook->vocab(); ++v) {
      codebook->usage[static_cast<size_t>(v)] = static_cast<int64_t>(u[v]);
      codebook->stale[static_cast<size_t>(v)] = static_cast<int64_t>(st[v]);
    }
  }
}

void VqvaeBundle::freeze_all() {
  ps.freeze_prefix("");
  decoder->freeze(ps);
}

std::unique_ptr<ArBundle> ArBundle::build(const RunConfig& cfg) {
  auto b = std::make_unique<ArBundle>();
  RngStream rng(mix_seed(cfg.seed, "init.ar"));
  b->model = std::make_unique<ARModel>(b->ps, "ar", cfg.ar_config(), rng);
  return b;
}

uint64_t run_param_hash(const ParamStore& ps) { return ps.content_hash(); }

void gen_data(const RunConfig& cfg) {
  check_arg(!cfg.dataset.empty(), "gen-data: dataset path required");
  std::vector<MultiViewSample> samples;
  for (int i = 0; i < cfg.data.assets; ++i) {
    SceneSDF scene = make_scene(mix_seed(cfg.seed, "asset", static_cast<uint64_t>(i)),
                                cfg.data.max_primitives);
    auto cams = sample_cameras(cfg.data.views, cfg.data.camera_radius,
                               mix_seed(cfg.seed, "cams", static_cast<uint64_t>(i)));
    char id[32];
    std::snprintf(id, sizeof(id), "asset_%04d", i);
    samples.push_back(make_sample(scene, cams, cfg.data.image_size, cfg.data.image_size,
                                  cfg.data.gt_steps, id));
  }
  write_dataset(samples, cfg.dataset);
}

// ---------------------------------------------------------------------------
// stage one
// ---------------------------------------------------------------------------

namespace {

void save_vqvae_checkpoint(const std::string& path, const RunConfig& cfg, VqvaeBundle& vq,
                           AdamW& opt, ParamStore* critic_ps, AdamW* critic_opt, int64_t step) {
  Checkpoint ck;
  ck.header["config"] = to_json(cfg);
  ck.header["step"] = step;
  ck.header["kind"] = "vqvae";
  ck.put_params("vqvae", vq.ps);
  ck.put_adam("adam", opt);
  if (critic_ps) {
    ck.put_params("critic", *critic_ps);
    ck.put_adam("adam_critic", *critic_opt);
  }
  ArrayX usage(vq.codebook->vocab()), stale(vq.codebook->vocab());
  for (long v = 0; v < vq.codebook->vocab(); ++v) {
    usage[v] = static_cast<Scalar>(vq.codebook->usage[static_cast<size_t>(v)]);
    stale[v] = static_cast<Scalar>(vq.codebook->stale[static_cast<size_t>(v)]);
  }
  ck.put("codebook_usage", {vq.codebook->vocab()}, std::move(usage));
  ck.put("codebook_stale", {vq.codebook->vocab()}, std::move(stale));
  save_checkpoint(path, ck);
}

}  // namespace

StageMetrics train_vqvae(const RunConfig& cfg) {
  apply_threads(cfg);
  check_arg(!cfg.out_dir.empty(), "train-vqvae: out_dir required");
  fs::create_directories(cfg.out_dir);
  auto samples = read_dataset(cfg.dataset);
  check_arg(!samples.empty(), "train-vqvae: dataset is empty");

  auto vq = VqvaeBundle::build(cfg);
  AdamW opt(cfg.train.lr, 0.9, 0.99, 1e-8, cfg.train.weight_decay);

  const bool use_gan = cfg.loss.lambda_gan > 0;
  ParamStore critic_ps;
  std::unique_ptr<PatchCritic> critic;
  std::unique_ptr<AdamW> critic_opt;
  if (use_gan) {
    RngStream crng(mix_seed(cfg.seed, "init.critic"));
    critic = std::make_unique<PatchCritic>(critic_ps, "critic", cfg.data.image_size, crng);
    critic_opt = std::make_unique<AdamW>(cfg.train.lr, 0.9, 0.99, 1e-8, 0.0);
  }

  int64_t start_step = 0;
  if (!cfg.train.resume_from.empty()) {
    Checkpoint ck = load_checkpoint(cfg.train.resume_from);
    vq->load(ck);
    ck.load_adam("adam", opt);
    if (use_gan && ck.has("critic/critic.head.w")) {
      ck.load_params("critic", critic_ps);
      ck.load_adam("adam_critic", *critic_opt);
    }
    start_step = ck.header.at("step").get<int64_t>();
  }

  TrainLog log(cfg.out_dir + "/train_log.txt");
  echo_config(cfg, log);
  {
    std::ofstream cf(cfg.out_dir + "/config.json");
    cf << to_json(cfg).dump(2) << "\n";
  }

  const int n_assets = static_cast<int>(samples.size());
  const int batch = std::min(cfg.train.vqvae_batch_size, n_assets);
  const int64_t steps_per_epoch = (n_assets + batch - 1) / batch;
  const int H = cfg.data.image_size, W = cfg.data.image_size;

  StageMetrics metrics;
  std::string last_ckpt;
  Scalar ema_loss = 0;

  for (int64_t s = start_step; s < cfg.train.vqvae_steps; ++s) {
    auto batch_idx = pick_batch(cfg.seed, s, n_assets, batch);
    vq->ps.zero_grads();

    Scalar loss_value = 0, render_value = 0, vq_value = 0, adv_value = 0;
    std::vector<Tensor> fake_values, real_values;
    MatrixX recent_vectors;

    for (size_t bi = 0; bi < batch_idx.size(); ++bi) {
      const auto& sample = samples[static_cast<size_t>(batch_idx[bi])];
      Tensor f = vq->encoder->encode(sample);
      auto qr = quantize_multiscale(f, vq->schedule, *vq->codebook);
      TriplaneField field = vq->decoder->decode_field(qr.fhat);

      // seeded view subset for rendering supervision
      std::vector<int> view_ids(sample.views.size());
      for (size_t v = 0; v < view_ids.size(); ++v) view_ids[v] = static_cast<int>(v);
      if (cfg.train.views_per_step > 0 &&
          cfg.train.views_per_step < static_cast<int>(sample.views.size())) {
        RngStream vrng(mix_seed(cfg.seed, "views", static_cast<uint64_t>(s),
                                static_cast<uint64_t>(batch_idx[bi])));
        for (int v = static_cast<int>(view_ids.size()) - 1; v > 0; --v)
          std::swap(view_ids[static_cast<size_t>(v)],
                    view_ids[static_cast<size_t>(vrng.uniform_int(0, v))]);
        view_ids.resize(static_cast<size_t>(cfg.train.views_per_step));
      }

      Tensor render_total;
      std::vector<Tensor> asset_fakes;
      for (int vid : view_ids) {
        const ViewRGBD& gt = sample.views[static_cast<size_t>(vid)];
        RenderConfig rc = vq->rcfg;
        rc.jitter_seed = mix_seed(cfg.seed, "jitter", static_cast<uint64_t>(s),
                                  static_cast<uint64_t>(batch_idx[bi] * 64 + vid));
        RenderedView rv = volume_render(field, gt.camera, H, W, rc);
        Tensor rl = render_loss(rv, gt, cfg.loss);
        render_total = render_total.defined() ? render_total + rl : rl;
        if (use_gan) {
          asset_fakes.push_back(rv.rgb);
          real_values.push_back(to_tensor(gt.rgb));
        }
      }
      render_total = render_total * (1.0 / static_cast<Scalar>(view_ids.size()));
      Tensor vq_l = vq_loss(qr.scale_pairs, cfg.loss.beta);

      Tensor gen_adv;
      if (use_gan) gen_adv = generator_adv_loss(stack_images_nchw(asset_fakes), *critic);

      Tensor total =
          vqvae_total_loss(render_total, vq_l, gen_adv, cfg.loss) *
          (1.0 / static_cast<Scalar>(batch_idx.size()));

      loss_value += total.item() * static_cast<Scalar>(batch_idx.size());
      render_value += render_total.value()[0];
      vq_value += vq_l.value()[0];
      if (use_gan) {
        adv_value += gen_adv.value()[0];
        for (Tensor& fv : asset_fakes) fake_values.push_back(detach(fv));
      }
      // finest-scale encoder vectors feed dead-code revival
      {
        const Tensor& vecs = qr.scale_pairs.back().first;
        long rows = std::min<long>(vecs.dim(0), 96);
        long offset = recent_vectors.rows();
        recent_vectors.conservativeResize(offset + rows, vq->codebook->dim());
        for (long rr = 0; rr < rows; ++rr)
          for (int cc = 0; cc < vq->codebook->dim(); ++cc)
            recent_vectors(offset + rr, cc) = vecs.value()[rr * vq->codebook->dim() + cc];
      }
      total.backward();
    }

    Scalar mean_loss = loss_value / static_cast<Scalar>(batch_idx.size());
    if (!std::isfinite(mean_loss))
      throw StateError("train-vqvae: non-finite loss at step " + std::to_string(s) +
                       (last_ckpt.empty() ? std::string("; no checkpoint written yet")
                                          : "; last good checkpoint: " + last_ckpt));
    opt.step(vq->ps, lr_at(cfg.train, cfg.train.vqvae_lr_schedule, s, cfg.train.vqvae_steps));

    if (use_gan) {
      Tensor real_batch = stack_images_nchw(real_values);
      Tensor fake_batch = stack_images_nchw(fake_values);
      for (int ic = 0; ic < cfg.train.n_critic; ++ic) {
        critic_ps.zero_grads();
        Tensor cl = critic_loss(real_batch, fake_batch, *critic, cfg.loss.lambda_gp,
                                mix_seed(cfg.seed, "gp", static_cast<uint64_t>(s),
                                         static_cast<uint64_t>(ic)));
        Scalar cl_v = cl.item();
        cl.backward();
        critic_opt->step(critic_ps);
        if ((s + 1) % cfg.train.log_every == 0 && ic == 0) log.scalar(s, "critic_loss", cl_v);
      }
    }

    vq->codebook->end_step();
    if (cfg.train.revive_every > 0 && (s + 1) % cfg.train.revive_every == 0 &&
        recent_vectors.rows() > 0) {
      int revived = revive_dead_codes(*vq->codebook, recent_vectors, cfg.train.revive_threshold,
                                      mix_seed(cfg.seed, "revive-step", static_cast<uint64_t>(s)));
      if (revived > 0 && (s + 1) % cfg.train.log_every == 0)
        log.scalar(s, "revived_codes", static_cast<Scalar>(revived));
    }
    if ((s + 1) % steps_per_epoch == 0) vq->codebook->reset_usage();

    if (s == start_step) metrics.first_loss = mean_loss;
    metrics.final_loss = mean_loss;
    ema_loss = s == start_step ? mean_loss : 0.98 * ema_loss + 0.02 * mean_loss;

    if ((s + 1) % cfg.train.log_every == 0 || s + 1 == cfg.train.vqvae_steps) {
      log.scalar(s, "loss_total", mean_loss);
      log.scalar(s, "loss_render", render_value / static_cast<Scalar>(batch_idx.size()));
      log.scalar(s, "loss_vq", vq_value / static_cast<Scalar>(batch_idx.size()));
      if (use_gan) log.scalar(s, "loss_adv", adv_value / static_cast<Scalar>(batch_idx.size()));
      auto [val_psnr, util] = validate_recon(*vq, samples, cfg.train.val_assets);
      log.scalar(s, "val_psnr", val_psnr);
      log.scalar(s, "codebook_utilization", util);
      metrics.val_psnr = val_psnr;
      metrics.utilization = util;
      if (cfg.train.target_psnr > 0 && val_psnr >= cfg.train.target_psnr &&
          util >= cfg.train.target_utilization) {
        log.text("early stop: targets reached");
        metrics.steps_run = s + 1;
        break;
      }
    }
    if ((s + 1) % cfg.train.checkpoint_every == 0 && s + 1 < cfg.train.vqvae_steps) {
      last_ckpt = cfg.out_dir + "/vqvae_step" + std::to_string(s + 1) + ".ckpt";
      save_vqvae_checkpoint(last_ckpt, cfg, *vq, opt, use_gan ? &critic_ps : nullptr,
                            critic_opt.get(), s + 1);
    }
    metrics.steps_run = s + 1;
  }

  metrics.checkpoint_path = cfg.out_dir + "/vqvae.ckpt";
  save_vqvae_checkpoint(metrics.checkpoint_path, cfg, *vq, opt, use_gan ? &critic_ps : nullptr,
                        critic_opt.get(), metrics.steps_run);
  metrics.param_hash = vq->ps.content_hash();
  if (metrics.val_psnr == 0) {
    auto [val_psnr, util] = validate_recon(*vq, samples, cfg.train.val_assets);
    metrics.val_psnr = val_psnr;
    metrics.utilization = util;
  }
  return metrics;
}

// ---------------------------------------------------------------------------
// stage two
// ---------------------------------------------------------------------------

std::vector<TokenPyramid> tokenize_dataset(const std::vector<MultiViewSample>& samples,
                                           VqvaeBundle& vq, const std::string& cache_path) {
  const uint64_t cb_hash = vq.codebook->content_hash();
  if (!cache_path.empty() && fs::exists(cache_path)) {
    std::ifstream f(cache_path, std::ios::binary);
    uint64_t stored = 0;
    uint32_t count = 0;
    f.read(reinterpret_cast<char*>(&stored), 8);
    f.read(reinterpret_cast<char*>(&count), 4);
    if (!f) throw IOError("corrupt token cache: " + cache_path);
    if (stored != cb_hash)
      throw StateError("token cache " + cache_path +
                       " is stale (codebook hash changed); delete it to re-tokenize");
    if (count != samples.size())
      throw StateError("token cache " + cache_path +
                       " holds a different asset count; delete it to re-tokenize");
    std::vector<TokenPyramid> out;
    for (uint32_t i = 0; i < count; ++i) {
      uint32_t k = 0;
      f.read(reinterpret_cast<char*>(&k), 4);
      ScaleSchedule sched;
      for (uint32_t j = 0; j < k; ++j) {
        uint32_t r;
        f.read(reinterpret_cast<char*>(&r), 4);
        sched.r.push_back(static_cast<int>(r));
      }
      std::vector<int> seq(static_cast<size_t>(sched.total_tokens()));
      f.read(reinterpret_cast<char*>(seq.data()),
             static_cast<std::streamsize>(seq.size() * sizeof(int)));
      if (!f) throw IOError("corrupt token cache: " + cache_path);
      out.push_back(deserialize_tokens(seq, sched));
    }
    return out;
  }

  std::vector<TokenPyramid> out;
  NoGradGuard off;
  for (const auto& s : samples) {
    Tensor f = vq.encoder->encode(s);
    out.push_back(quantize_multiscale(f, vq.schedule, *vq.codebook).tokens);
  }
  if (!cache_path.empty()) {
    std::ofstream f(cache_path, std::ios::binary);
    if (!f) throw IOError("cannot write token cache: " + cache_path);
    uint32_t count = static_cast<uint32_t>(out.size());
    f.write(reinterpret_cast<const char*>(&cb_hash), 8);
    f.write(reinterpret_cast<const char*>(&count), 4);
    for (const auto& p : out) {
      uint32_t k = static_cast<uint32_t>(p.schedule.r.size());
      f.write(reinterpret_cast<const char*>(&k), 4);
      for (int r : p.schedule.r) {
        uint32_t rv = static_cast<uint32_t>(r);
        f.write(reinterpret_cast<const char*>(&rv), 4);
      }
      std::vector<int> seq = serialize_tokens(p);
      f.write(reinterpret_cast<const char*>(seq.data()),
              static_cast<std::streamsize>(seq.size() * sizeof(int)));
    }
  }
  return out;
}

namespace {

// Stage-two runs inherit the tokenizer architecture from the stage-one
// checkpoint; only training/ar/loss sections come from the live config.
RunConfig merge_vqvae_arch(const RunConfig& cfg, const Checkpoint& vq_ck) {
  RunConfig arch = config_from_json(vq_ck.header.at("config"));
  RunConfig eff = cfg;
  eff.vqvae = arch.vqvae;
  eff.data = arch.data;
  return eff;
}

void save_ar_checkpoint(const std::string& path, const RunConfig& cfg, ArBundle& ar, AdamW& opt,
                        int64_t step, uint64_t vq_hash) {
  Checkpoint ck;
  ck.header["config"] = to_json(cfg);
  ck.header["step"] = step;
  ck.header["kind"] = "ar";
  ck.header["vqvae_param_hash"] = vq_hash;
  ck.put_params("ar", ar.ps);
  ck.put_adam("adam", opt);
  save_checkpoint(path, ck);
}

}  // namespace

StageMetrics train_ar(const RunConfig& cfg) {
  apply_threads(cfg);
  check_arg(!cfg.out_dir.empty(), "train-ar: out_dir required");
  check_arg(!cfg.vqvae_checkpoint.empty(), "train-ar: vqvae_checkpoint required");
  fs::create_directories(cfg.out_dir);

  Checkpoint vq_ck = load_checkpoint(cfg.vqvae_checkpoint);
  RunConfig eff = merge_vqvae_arch(cfg, vq_ck);
  auto vq = VqvaeBundle::build(eff);
  vq->load(vq_ck);
  vq->freeze_all();
  const uint64_t vq_hash = vq->ps.content_hash();

  auto samples = read_dataset(cfg.dataset);
  check_arg(!samples.empty(), "train-ar: dataset is empty");
  auto tokens = tokenize_dataset(samples, *vq, cfg.out_dir + "/token_cache.bin");

  auto ar = ArBundle::build(eff);
  AdamW opt(cfg.train.lr, 0.9, 0.95, 1e-8, cfg.train.weight_decay);

  int64_t start_step = 0;
  if (!cfg.train.resume_from.empty()) {
    Checkpoint ck = load_checkpoint(cfg.train.resume_from);
    ck.load_params("ar", ar->ps);
    ck.load_adam("adam", opt);
    start_step = ck.header.at("step").get<int64_t>();
  }

  TrainLog log(cfg.out_dir + "/train_log.txt");
  echo_config(eff, log);
  {
    std::ofstream cf(cfg.out_dir + "/config.json");
    cf << to_json(eff).dump(2) << "\n";
  }

  const int n_assets = static_cast<int>(samples.size());
  const int batch = std::min(cfg.train.ar_batch_size, n_assets);
  const Scalar gamma = cfg.loss.gamma;
  StageMetrics metrics;
  std::string last_ckpt;

  for (int64_t s = start_step; s < cfg.train.ar_steps; ++s) {
    auto batch_idx = pick_batch(cfg.seed ^ 0xa5a5a5a5ull, s, n_assets, batch);
    ar->ps.zero_grads();
    Scalar ce_value = 0, rend_value = 0, total_value = 0;

    for (size_t bi = 0; bi < batch_idx.size(); ++bi) {
      int a = batch_idx[bi];
      const auto& sample = samples[static_cast<size_t>(a)];
      RngStream drop_rng(mix_seed(cfg.seed, "cdrop", static_cast<uint64_t>(s),
                                  static_cast<uint64_t>(a)));
      TextCondition cond = drop_rng.uniform() < cfg.ar.cond_dropout
                               ? ar->model->null_condition()
                               : ar->model->text_embed(sample.caption);
      auto logits = ar->model->forward_all(tokens[static_cast<size_t>(a)], *vq->codebook, cond);
      Tensor ce = ar->model->ce_loss(logits, tokens[static_cast<size_t>(a)]);

      Tensor rend;
      if (gamma > 0) {
        RngStream grng(mix_seed(cfg.seed, "gumbel", static_cast<uint64_t>(s),
                                static_cast<uint64_t>(a)));
        std::vector<Tensor> fz;
        for (const Tensor& lg : logits) fz.push_back(gumbel_st_sample(lg, cfg.ar.tau, grng));
        RngStream vrng(mix_seed(cfg.seed, "rendview", static_cast<uint64_t>(s),
                                static_cast<uint64_t>(a)));
        const ViewRGBD& gt =
            sample.views[static_cast<size_t>(vrng.uniform_int(0, static_cast<int>(sample.views.size()) - 1))];
        rend = render_supervision_loss(fz, *vq->codebook, *vq->decoder, gt, vq->rcfg,
                                       cfg.loss.lambda_l1, cfg.loss.lambda_l2);
      }
      Tensor total = total_ar_loss(ce, rend, gamma) * (1.0 / static_cast<Scalar>(batch_idx.size()));
      ce_value += ce.value()[0];
      if (rend.defined()) rend_value += rend.value()[0];
      total_value += total.item() * static_cast<Scalar>(batch_idx.size());
      total.backward();
    }

    Scalar mean_loss = total_value / static_cast<Scalar>(batch_idx.size());
    if (!std::isfinite(mean_loss))
      throw StateError("train-ar: non-finite loss at step " + std::to_string(s) +
                       (last_ckpt.empty() ? std::string("; no checkpoint written yet")
                                          : "; last good checkpoint: " + last_ckpt));
    opt.step(ar->ps, lr_at(cfg.train, cfg.train.ar_lr_schedule, s, cfg.train.ar_steps));

    if (s == start_step) metrics.first_loss = mean_loss;
    metrics.final_loss = mean_loss;
    if ((s + 1) % cfg.train.log_every == 0 || s + 1 == cfg.train.ar_steps) {
      log.scalar(s, "loss_ce", ce_value / static_cast<Scalar>(batch_idx.size()));
      if (gamma > 0) log.scalar(s, "loss_rend", rend_value / static_cast<Scalar>(batch_idx.size()));
      log.scalar(s, "loss_total", mean_loss);
    }
    if ((s + 1) % cfg.train.checkpoint_every == 0 && s + 1 < cfg.train.ar_steps) {
      last_ckpt = cfg.out_dir + "/ar_step" + std::to_string(s + 1) + ".ckpt";
      save_ar_checkpoint(last_ckpt, eff, *ar, opt, s + 1, vq_hash);
    }
    metrics.steps_run = s + 1;
  }

  metrics.checkpoint_path = cfg.out_dir + "/ar.ckpt";
  save_ar_checkpoint(metrics.checkpoint_path, eff, *ar, opt, metrics.steps_run, vq_hash);
  metrics.param_hash = ar->ps.content_hash();
  return metrics;
}

// ---------------------------------------------------------------------------
// sampling / eval / debug rendering
// ---------------------------------------------------------------------------

namespace {

void check_checkpoint_consistency(const RunConfig& vq_cfg, const RunConfig& ar_cfg) {
  std::ostringstream diffs;
  auto cmp_int = [&](const char* key, int a, int b) {
    if (a != b) diffs << "  " << key << ": vqvae " << a << " vs ar " << b << "\n";
  };
  cmp_int("vqvae.codebook_size", vq_cfg.vqvae.codebook_size, ar_cfg.vqvae.codebook_size);
  cmp_int("vqvae.dq", vq_cfg.vqvae.dq, ar_cfg.vqvae.dq);
  cmp_int("vqvae.latent_res", vq_cfg.vqvae.latent_res, ar_cfg.vqvae.latent_res);
  cmp_int("vqvae.c_field", vq_cfg.vqvae.c_field, ar_cfg.vqvae.c_field);
  cmp_int("vqvae.up_factor", vq_cfg.vqvae.up_factor, ar_cfg.vqvae.up_factor);
  if (vq_cfg.vqvae.schedule != ar_cfg.vqvae.schedule) {
    diffs << "  vqvae.schedule differs\n";
  }
  std::string text = diffs.str();
  if (!text.empty())
    throw StateError("checkpoints disagree on the tokenizer configuration:\n" + text);
}

}  // namespace

SampleOutput sample_asset(const RunConfig& cfg) {
  apply_threads(cfg);
  check_arg(!cfg.out_dir.empty(), "sample: out_dir required");
  check_arg(!cfg.vqvae_checkpoint.empty() && !cfg.ar_checkpoint.empty(),
            "sample: both checkpoints required");
  fs::create_directories(cfg.out_dir);

  Checkpoint vq_ck = load_checkpoint(cfg.vqvae_checkpoint);
  Checkpoint ar_ck = load_checkpoint(cfg.ar_checkpoint);
  RunConfig vq_cfg = config_from_json(vq_ck.header.at("config"));
  RunConfig ar_cfg = config_from_json(ar_ck.header.at("config"));
  check_checkpoint_consistency(vq_cfg, ar_cfg);

  auto vq = VqvaeBundle::build(vq_cfg);
  vq->load(vq_ck);
  vq->freeze_all();
  RunConfig ar_build = ar_cfg;
  auto ar = ArBundle::build(ar_build);
  ar_ck.load_params("ar", ar->ps);

  SamplingParams sp{cfg.ar.top_k, cfg.ar.top_p, cfg.ar.temperature, cfg.ar.cfg_scale};
  NoGradGuard off;
  TextCondition cond = ar->model->text_embed(cfg.prompt);
  TokenPyramid pyramid = ar->model->generate(cond, sp, *vq->codebook, cfg.sample_seed);
  Tensor fhat = dequantize(pyramid, *vq->codebook);
  TriplaneField field = vq->decoder->decode_field(fhat);

  SampleOutput out;
  auto cams = sample_cameras(6, vq_cfg.data.camera_radius, kCanonicalCameraSeed);
  int res = vq_cfg.data.image_size;
  for (size_t i = 0; i < cams.size(); ++i) {
    RenderedView rv = volume_render(field, cams[i], res, res, vq->rcfg);
    std::string path = cfg.out_dir + "/view_" + std::to_string(i) + ".ppm";
    write_ppm(path, rgb_from_tensor(rv.rgb, true));
    out.image_paths.push_back(path);
  }
  out.field_path = cfg.out_dir + "/field.tpf";
  write_field_dump(out.field_path, field);
  out.token_path = cfg.out_dir + "/tokens.tok";
  write_token_dump(out.token_path, pyramid);
  out.metadata_path = cfg.out_dir + "/metadata.json";
  nlohmann::json meta{{"prompt", cfg.prompt},
                      {"seed", cfg.sample_seed},
                      {"sampling",
                       {{"top_k", sp.top_k},
                        {"top_p", sp.top_p},
                        {"temperature", sp.temperature},
                        {"cfg_scale", sp.cfg_scale}}},
                      {"vqvae_checkpoint", cfg.vqvae_checkpoint},
                      {"ar_checkpoint", cfg.ar_checkpoint}};
  std::ofstream mf(out.metadata_path);
  mf << meta.dump(2) << "\n";
  return out;
}

EvalReport eval_pipeline(const RunConfig& cfg) {
  apply_threads(cfg);
  check_arg(!cfg.vqvae_checkpoint.empty(), "eval: vqvae_checkpoint required");
  auto samples = read_dataset(cfg.dataset);
  if (samples.empty()) throw ArgumentError("eval: dataset split is empty");

  Checkpoint vq_ck = load_checkpoint(cfg.vqvae_checkpoint);
  RunConfig vq_cfg = config_from_json(vq_ck.header.at("config"));
  auto vq = VqvaeBundle::build(vq_cfg);
  vq->load(vq_ck);
  vq->freeze_all();

  std::unique_ptr<ArBundle> ar;
  if (!cfg.ar_checkpoint.empty()) {
    Checkpoint ar_ck = load_checkpoint(cfg.ar_checkpoint);
    RunConfig ar_cfg = config_from_json(ar_ck.header.at("config"));
    check_checkpoint_consistency(vq_cfg, ar_cfg);
    ar = ArBundle::build(ar_cfg);
    ar_ck.load_params("ar", ar->ps);
  }

  NoGradGuard off;
  vq->codebook->reset_usage();
  EvalReport rep;
  std::ostringstream table;
  table << "asset            recon_psnr recon_ssim recon_proxy";
  if (ar) table << "   gen_psnr   gen_ssim  gen_proxy";
  table << "\n";
  long n = 0;
  for (const auto& sample : samples) {
    Tensor f = vq->encoder->encode(sample);
    auto qr = quantize_multiscale(f, vq->schedule, *vq->codebook);
    TriplaneField field = vq->decoder->decode_field(qr.fhat);
    TriplaneField raw_field = vq->decoder->decode_field(f);
    Scalar ps = 0, ss = 0, px = 0, psu = 0;
    for (const auto& view : sample.views) {
      RenderedView rv = volume_render(field, view.camera, view.rgb.h, view.rgb.w, vq->rcfg);
      Tensor gt_rgb = to_tensor(view.rgb);
      ps += psnr(rv.rgb, gt_rgb);
      ss += ssim(rv.rgb, gt_rgb);
      px += perceptual_proxy(rv.rgb, gt_rgb).item();
      RenderedView ru = volume_render(raw_field, view.camera, view.rgb.h, view.rgb.w, vq->rcfg);
      psu += psnr(ru.rgb, gt_rgb);
    }
    Scalar nv = static_cast<Scalar>(sample.views.size());
    ps /= nv;
    ss /= nv;
    px /= nv;
    rep.recon_psnr += ps;
    rep.recon_ssim += ss;
    rep.recon_proxy += px;
    rep.recon_psnr_unquantized += psu / nv;

    Scalar gps = 0, gss = 0, gpx = 0;
    if (ar) {
      TextCondition cond = ar->model->text_embed(sample.caption);
      SamplingParams sp{cfg.ar.top_k, cfg.ar.top_p, cfg.ar.temperature, cfg.ar.cfg_scale};
      TokenPyramid pyr = ar->model->generate(cond, sp, *vq->codebook,
                                             mix_seed(cfg.sample_seed, "eval-gen",
                                                      static_cast<uint64_t>(n)));
      TriplaneField gfield = vq->decoder->decode_field(dequantize(pyr, *vq->codebook));
      for (const auto& view : sample.views) {
        RenderedView rv = volume_render(gfield, view.camera, view.rgb.h, view.rgb.w, vq->rcfg);
        Tensor gt_rgb = to_tensor(view.rgb);
        gps += psnr(rv.rgb, gt_rgb);
        gss += ssim(rv.rgb, gt_rgb);
        gpx += perceptual_proxy(rv.rgb, gt_rgb).item();
      }
      gps /= nv;
      gss /= nv;
      gpx /= nv;
      rep.gen_psnr += gps;
      rep.gen_ssim += gss;
      rep.gen_proxy += gpx;
    }
    char row[256];
    if (ar)
      std::snprintf(row, sizeof(row), "%-16s %10.4f %10.4f %11.6f %10.4f %10.4f %10.6f\n",
                    sample.asset_id.c_str(), ps, ss, px, gps, gss, gpx);
    else
      std::snprintf(row, sizeof(row), "%-16s %10.4f %10.4f %11.6f\n", sample.asset_id.c_str(),
                    ps, ss, px);
    table << row;
    ++n;
  }
  Scalar count = static_cast<Scalar>(n);
  rep.recon_psnr /= count;
  rep.recon_ssim /= count;
  rep.recon_proxy /= count;
  if (ar) {
    rep.gen_psnr /= count;
    rep.gen_ssim /= count;
    rep.gen_proxy /= count;
  }
  rep.utilization = codebook_health(*vq->codebook).utilization;
  char means[512];
  std::snprintf(means, sizeof(means),
                "mean recon: psnr %.4f ssim %.4f proxy %.6f\nmean gen: psnr %.4f ssim %.4f "
                "proxy %.6f\ncodebook utilization: %.4f\n",
                rep.recon_psnr, rep.recon_ssim, rep.recon_proxy, rep.gen_psnr, rep.gen_ssim,
                rep.gen_proxy, rep.utilization);
  table << means;
  rep.table = table.str();
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    std::ofstream rf(cfg.out_dir + "/eval_report.txt");
    rf << rep.table;
  }
  return rep;
}

void render_field_grid(const RunConfig& cfg) {
  apply_threads(cfg);
  check_arg(!cfg.field_path.empty(), "render-field: field_path required");
  check_arg(!cfg.vqvae_checkpoint.empty(), "render-field: vqvae_checkpoint required");
  check_arg(!cfg.out_dir.empty(), "render-field: out_dir required");
  fs::create_directories(cfg.out_dir);

  Checkpoint vq_ck = load_checkpoint(cfg.vqvae_checkpoint);
  RunConfig vq_cfg = config_from_json(vq_ck.header.at("config"));
  auto vq = VqvaeBundle::build(vq_cfg);
  vq->load(vq_ck);
  vq->freeze_all();

  Tensor planes = read_field_dump(cfg.field_path);
  check_arg(planes.dim(1) == vq_cfg.vqvae.c_field,
            "render-field: field channels mismatch the checkpoint's point decoder");
  TriplaneField field;
  field.planes = planes;
  field.decoder = &vq->decoder->point_decoder();

  NoGradGuard off;
  auto cams = sample_cameras(6, vq_cfg.data.camera_radius, kCanonicalCameraSeed);
  int res = vq_cfg.data.image_size;
  ImageRGB grid(2 * res, 3 * res);
  for (int i = 0; i < 6; ++i) {
    RenderedView rv = volume_render(field, cams[static_cast<size_t>(i)], res, res, vq->rcfg);
    ImageRGB img = rgb_from_tensor(rv.rgb, true);
    int oy = (i / 3) * res, ox = (i % 3) * res;
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x)
        for (int c = 0; c < 3; ++c) grid.at(oy + y, ox + x, c) = img.at(y, x, c);
  }
  write_ppm(cfg.out_dir + "/field_grid.ppm", grid);
}

}  // namespace var3d
