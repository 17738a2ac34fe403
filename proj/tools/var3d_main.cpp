#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "var3d/pipeline.hpp"

using namespace var3d;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string dataset, out, vqvae_ckpt, ar_ckpt, field;
  std::string prompt;
  uint64_t seed = 0;
  bool seed_set = false;
  int top_k = -1;
  double top_p = -1, temperature = -1, cfg_scale = -1;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "JSON config file");
  cmd->add_option("--set", a.overrides, "config override key=value (repeatable)");
  cmd->add_option("--dataset", a.dataset, "dataset directory");
  cmd->add_option("--out", a.out, "output directory");
}

RunConfig resolve(const CommonArgs& a, const std::string& stage) {
  std::vector<std::string> ov = a.overrides;
  auto push = [&ov](const std::string& key, const std::string& value) {
    ov.push_back(key + "=" + value);
  };
  push("stage", "\"" + stage + "\"");
  if (!a.dataset.empty()) push("dataset", "\"" + a.dataset + "\"");
  if (!a.out.empty()) push("out_dir", "\"" + a.out + "\"");
  if (!a.vqvae_ckpt.empty()) push("vqvae_checkpoint", "\"" + a.vqvae_ckpt + "\"");
  if (!a.ar_ckpt.empty()) push("ar_checkpoint", "\"" + a.ar_ckpt + "\"");
  if (!a.field.empty()) push("field_path", "\"" + a.field + "\"");
  if (!a.prompt.empty()) push("prompt", "\"" + a.prompt + "\"");
  if (a.seed_set) push("sample_seed", std::to_string(a.seed));
  if (a.top_k >= 0) push("ar.top_k", std::to_string(a.top_k));
  if (a.top_p >= 0) push("ar.top_p", std::to_string(a.top_p));
  if (a.temperature >= 0) push("ar.temperature", std::to_string(a.temperature));
  if (a.cfg_scale >= 0) push("ar.cfg_scale", std::to_string(a.cfg_scale));

  RunConfig cfg = parse_config(a.config_path, ov);
  if (cfg.out_dir.empty()) {
    const char* root = std::getenv("VAR3D_OUT_ROOT");
    cfg.out_dir = (root && *root) ? std::string(root) + "/" + stage : "runs/" + stage;
  }
  std::cout << "resolved config: " << to_json(cfg).dump() << "\n";
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"var3d: view-aware autoregressive text-to-3D at desk scale"};
  app.require_subcommand(1);

  CommonArgs a;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic multi-view dataset");
  add_common(gen, a);
  auto* tv = app.add_subcommand("train-vqvae", "stage one: train the multi-view VQ-VAE");
  add_common(tv, a);
  auto* ta = app.add_subcommand("train-ar", "stage two: train the next-scale generator");
  add_common(ta, a);
  ta->add_option("--vqvae", a.vqvae_ckpt, "stage-one checkpoint");
  auto* sm = app.add_subcommand("sample", "generate an asset from a text prompt");
  add_common(sm, a);
  sm->add_option("--vqvae", a.vqvae_ckpt, "stage-one checkpoint");
  sm->add_option("--ar", a.ar_ckpt, "stage-two checkpoint");
  sm->add_option("--prompt", a.prompt, "text prompt");
  sm->add_option("--seed", a.seed, "sampling seed")->each([&a](const std::string&) {
    a.seed_set = true;
  });
  sm->add_option("--top-k", a.top_k, "top-k filter (0 = off)");
  sm->add_option("--top-p", a.top_p, "nucleus filter (1 = off)");
  sm->add_option("--temperature", a.temperature, "sampling temperature");
  sm->add_option("--cfg-scale", a.cfg_scale, "classifier-free guidance scale (1 = off)");
  auto* ev = app.add_subcommand("eval", "reconstruction and generation metrics");
  add_common(ev, a);
  ev->add_option("--vqvae", a.vqvae_ckpt, "stage-one checkpoint");
  ev->add_option("--ar", a.ar_ckpt, "stage-two checkpoint");
  ev->add_option("--seed", a.seed, "generation seed")->each([&a](const std::string&) {
    a.seed_set = true;
  });
  auto* rf = app.add_subcommand("render-field", "render a triplane field dump to an image grid");
  add_common(rf, a);
  rf->add_option("--field", a.field, "field dump (.tpf)");
  rf->add_option("--vqvae", a.vqvae_ckpt, "stage-one checkpoint (point decoder)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      RunConfig cfg = resolve(a, "gen-data");
      if (cfg.dataset.empty()) cfg.dataset = cfg.out_dir + "/dataset";
      gen_data(cfg);
      std::cout << "dataset written to " << cfg.dataset << "\n";
    } else if (tv->parsed()) {
      StageMetrics m = train_vqvae(resolve(a, "train-vqvae"));
      std::cout << "trained " << m.steps_run << " steps; final loss " << m.final_loss
                << "; val psnr " << m.val_psnr << "; checkpoint " << m.checkpoint_path << "\n";
    } else if (ta->parsed()) {
      StageMetrics m = train_ar(resolve(a, "train-ar"));
      std::cout << "trained " << m.steps_run << " steps; final loss " << m.final_loss
                << "; checkpoint " << m.checkpoint_path << "\n";
    } else if (sm->parsed()) {
      SampleOutput out = sample_asset(resolve(a, "sample"));
      std::cout << "wrote " << out.image_paths.size() << " views, " << out.field_path << ", "
                << out.token_path << "\n";
    } else if (ev->parsed()) {
      EvalReport rep = eval_pipeline(resolve(a, "eval"));
      std::cout << rep.table;
    } else if (rf->parsed()) {
      RunConfig cfg = resolve(a, "render-field");
      render_field_grid(cfg);
      std::cout << "wrote " << cfg.out_dir << "/field_grid.ppm\n";
    }
  } catch (const ArgumentError& e) {
    std::cerr << "[argument-error] " << e.what() << "\n";
    return 2;
  } catch (const IOError& e) {
    std::cerr << "[io-error] " << e.what() << "\n";
    return 3;
  } catch (const StateError& e) {
    std::cerr << "[state-error] " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "[error] " << e.what() << "\n";
    return 1;
  }
  return 0;
}
