#include "var3d/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace var3d {

namespace {

using nlohmann::json;

struct KeyReader {
  const json& j;
  std::string section;
  std::set<std::string> known;

  template <class T>
  void get(const char* key, T& out, const char* type_name) {
    known.insert(key);
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception&) {
      throw ArgumentError("config key '" + section + key + "': expected " + type_name);
    }
  }
  void get_int(const char* key, int& out) { get(key, out, "integer"); }
  void get_i64(const char* key, int64_t& out) { get(key, out, "integer"); }
  void get_u64(const char* key, uint64_t& out) { get(key, out, "unsigned integer"); }
  void get_real(const char* key, Scalar& out) { get(key, out, "number"); }
  void get_bool(const char* key, bool& out) { get(key, out, "boolean"); }
  void get_str(const char* key, std::string& out) { get(key, out, "string"); }
  void get_ints(const char* key, std::vector<int>& out) { get(key, out, "integer array"); }

  const json* sub(const char* key) {
    known.insert(key);
    if (!j.contains(key)) return nullptr;
    if (!j.at(key).is_object())
      throw ArgumentError("config key '" + section + key + "': expected object");
    return &j.at(key);
  }
  void finish() const {
    for (const auto& [k, v] : j.items())
      if (!known.count(k))
        throw ArgumentError("unknown config key '" + section + k + "'");
  }
};

void read_data(const json& j, DataConfig& c) {
  KeyReader r{j, "data."};
  r.get_int("assets", c.assets);
  r.get_int("views", c.views);
  r.get_int("image_size", c.image_size);
  r.get_real("camera_radius", c.camera_radius);
  r.get_int("max_primitives", c.max_primitives);
  r.get_int("gt_steps", c.gt_steps);
  r.finish();
}

void read_vqvae(const json& j, VqvaeSection& c) {
  KeyReader r{j, "vqvae."};
  r.get_ints("widths", c.widths);
  r.get_ints("strides", c.strides);
  r.get_ints("attn_levels", c.attn_levels);
  r.get_int("attn_heads", c.attn_heads);
  r.get_bool("view_embedding", c.view_embedding);
  r.get_int("latent_res", c.latent_res);
  r.get_int("dq", c.dq);
  r.get_int("codebook_size", c.codebook_size);
  r.get_ints("schedule", c.schedule);
  r.get_int("c_dec", c.c_dec);
  r.get_int("c_field", c.c_field);
  r.get_int("up_factor", c.up_factor);
  r.get_int("point_hidden", c.point_hidden);
  r.get_bool("share_plane_weights", c.share_plane_weights);
  r.get_int("render_steps", c.render_steps);
  r.get_real("render_near", c.render_near);
  r.get_real("render_far", c.render_far);
  r.get_bool("render_jitter", c.render_jitter);
  r.finish();
}

void read_loss(const json& j, LossWeights& c) {
  KeyReader r{j, "loss."};
  r.get_real("lambda_render", c.lambda_render);
  r.get_real("lambda_vq", c.lambda_vq);
  r.get_real("lambda_gan", c.lambda_gan);
  r.get_real("lambda_mae", c.lambda_mae);
  r.get_real("lambda_ssim", c.lambda_ssim);
  r.get_real("lambda_lpips", c.lambda_lpips);
  r.get_real("beta", c.beta);
  r.get_real("lambda_gp", c.lambda_gp);
  r.get_real("lambda_l1", c.lambda_l1);
  r.get_real("lambda_l2", c.lambda_l2);
  r.get_real("gamma", c.gamma);
  r.finish();
}

void read_ar(const json& j, ArSection& c) {
  KeyReader r{j, "ar."};
  r.get_int("blocks", c.blocks);
  r.get_int("heads", c.heads);
  r.get_int("width", c.width);
  r.get_int("cross_attn_every", c.cross_attn_every);
  r.get_real("cond_dropout", c.cond_dropout);
  r.get_real("tau", c.tau);
  r.get_int("text_width", c.text_width);
  r.get_int("text_buckets", c.text_buckets);
  r.get_int("top_k", c.top_k);
  r.get_real("top_p", c.top_p);
  r.get_real("temperature", c.temperature);
  r.get_real("cfg_scale", c.cfg_scale);
  r.finish();
}

void read_train(const json& j, TrainSection& c) {
  KeyReader r{j, "train."};
  r.get_int("vqvae_batch_size", c.vqvae_batch_size);
  r.get_int("ar_batch_size", c.ar_batch_size);
  r.get_int("vqvae_steps", c.vqvae_steps);
  r.get_int("ar_steps", c.ar_steps);
  r.get_real("lr", c.lr);
  r.get_str("vqvae_lr_schedule", c.vqvae_lr_schedule);
  r.get_str("ar_lr_schedule", c.ar_lr_schedule);
  r.get_real("weight_decay", c.weight_decay);
  r.get_int("checkpoint_every", c.checkpoint_every);
  r.get_int("log_every", c.log_every);
  r.get_int("views_per_step", c.views_per_step);
  r.get_int("n_critic", c.n_critic);
  r.get_i64("revive_threshold", c.revive_threshold);
  r.get_int("revive_every", c.revive_every);
  r.get_int("val_assets", c.val_assets);
  r.get_real("target_psnr", c.target_psnr);
  r.get_real("target_utilization", c.target_utilization);
  r.get_str("resume_from", c.resume_from);
  r.finish();
}

}  // namespace

void RunConfig::validate() const {
  static const std::set<std::string> stages{"gen-data",  "train-vqvae", "train-ar",
                                            "sample",    "eval",        "render-field"};
  check_arg(stages.count(stage) == 1, "config key 'stage': unknown stage '" + stage + "'");
  check_arg(data.assets >= 1, "config key 'data.assets': must be >= 1");
  check_arg(data.views >= 2, "config key 'data.views': must be >= 2");
  check_arg(data.image_size >= 16, "config key 'data.image_size': must be >= 16");
  check_arg(data.camera_radius > 1.0, "config key 'data.camera_radius': must be > 1");
  check_arg(data.max_primitives >= 1 && data.max_primitives <= 6,
            "config key 'data.max_primitives': must be in [1,6]");
  check_arg(data.gt_steps >= 16, "config key 'data.gt_steps': must be >= 16");
  loss.validate();
  encoder_config().validate();
  decoder_config().validate();
  render_config().validate();
  scale_schedule().validate(vqvae.latent_res);
  ar_config().validate();
  check_arg(train.vqvae_batch_size >= 1 && train.ar_batch_size >= 1,
            "config key 'train.*batch_size': must be >= 1");
  check_arg(train.vqvae_steps >= 1 && train.ar_steps >= 1,
            "config key 'train.*steps': must be >= 1");
  check_arg(train.lr > 0, "config key 'train.lr': must be > 0");
  for (const std::string& s : {train.vqvae_lr_schedule, train.ar_lr_schedule})
    check_arg(s == "constant" || s == "linear-decay",
              "config key 'train.*lr_schedule': must be 'constant' or 'linear-decay'");
  check_arg(train.n_critic >= 1, "config key 'train.n_critic': must be >= 1");
  check_arg(train.views_per_step >= 0, "config key 'train.views_per_step': must be >= 0");
  check_arg(threads >= 1, "config key 'threads': must be >= 1");
}

EncoderConfig RunConfig::encoder_config() const {
  EncoderConfig e;
  e.views = data.views;
  e.image_size = data.image_size;
  e.widths = vqvae.widths;
  e.strides = vqvae.strides;
  e.attn_levels = vqvae.attn_levels;
  e.attn_heads = vqvae.attn_heads;
  e.latent_res = vqvae.latent_res;
  e.latent_channels = vqvae.dq;
  e.view_embedding = vqvae.view_embedding;
  return e;
}

DecoderConfig RunConfig::decoder_config() const {
  DecoderConfig d;
  d.latent_channels = vqvae.dq;
  d.latent_res = vqvae.latent_res;
  d.unified_width = vqvae.c_dec;
  d.field_channels = vqvae.c_field;
  d.up_factor = vqvae.up_factor;
  d.point_hidden = vqvae.point_hidden;
  d.share_plane_weights = vqvae.share_plane_weights;
  return d;
}

RenderConfig RunConfig::render_config() const {
  RenderConfig r;
  r.steps = vqvae.render_steps;
  r.near_plane = vqvae.render_near;
  r.far_plane = vqvae.render_far;
  r.background = Vec3(1, 1, 1);
  r.jitter = vqvae.render_jitter;
  return r;
}

ScaleSchedule RunConfig::scale_schedule() const { return ScaleSchedule{vqvae.schedule}; }

ARConfig RunConfig::ar_config() const {
  ARConfig a;
  a.blocks = ar.blocks;
  a.heads = ar.heads;
  a.width = ar.width;
  a.schedule = scale_schedule();
  a.vocab = vqvae.codebook_size;
  a.dq = vqvae.dq;
  a.gamma = loss.gamma;
  a.tau = ar.tau;
  a.cross_attn_every = ar.cross_attn_every;
  a.cond_dropout = ar.cond_dropout;
  a.text_width = ar.text_width;
  a.text_buckets = ar.text_buckets;
  a.sampling = SamplingParams{ar.top_k, ar.top_p, ar.temperature, ar.cfg_scale};
  return a;
}

json to_json(const RunConfig& c) {
  json j;
  j["stage"] = c.stage;
  j["dataset"] = c.dataset;
  j["out_dir"] = c.out_dir;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["vqvae_checkpoint"] = c.vqvae_checkpoint;
  j["ar_checkpoint"] = c.ar_checkpoint;
  j["field_path"] = c.field_path;
  j["prompt"] = c.prompt;
  j["sample_seed"] = c.sample_seed;
  j["data"] = {{"assets", c.data.assets},
               {"views", c.data.views},
               {"image_size", c.data.image_size},
               {"camera_radius", c.data.camera_radius},
               {"max_primitives", c.data.max_primitives},
               {"gt_steps", c.data.gt_steps}};
  j["vqvae"] = {{"widths", c.vqvae.widths},
                {"strides", c.vqvae.strides},
                {"attn_levels", c.vqvae.attn_levels},
                {"attn_heads", c.vqvae.attn_heads},
                {"view_embedding", c.vqvae.view_embedding},
                {"latent_res", c.vqvae.latent_res},
                {"dq", c.vqvae.dq},
                {"codebook_size", c.vqvae.codebook_size},
                {"schedule", c.vqvae.schedule},
                {"c_dec", c.vqvae.c_dec},
                {"c_field", c.vqvae.c_field},
                {"up_factor", c.vqvae.up_factor},
                {"point_hidden", c.vqvae.point_hidden},
                {"share_plane_weights", c.vqvae.share_plane_weights},
                {"render_steps", c.vqvae.render_steps},
                {"render_near", c.vqvae.render_near},
                {"render_far", c.vqvae.render_far},
                {"render_jitter", c.vqvae.render_jitter}};
  j["loss"] = {{"lambda_render", c.loss.lambda_render},
               {"lambda_vq", c.loss.lambda_vq},
               {"lambda_gan", c.loss.lambda_gan},
               {"lambda_mae", c.loss.lambda_mae},
               {"lambda_ssim", c.loss.lambda_ssim},
               {"lambda_lpips", c.loss.lambda_lpips},
               {"beta", c.loss.beta},
               {"lambda_gp", c.loss.lambda_gp},
               {"lambda_l1", c.loss.lambda_l1},
               {"lambda_l2", c.loss.lambda_l2},
               {"gamma", c.loss.gamma}};
  j["ar"] = {{"blocks", c.ar.blocks},
             {"heads", c.ar.heads},
             {"width", c.ar.width},
             {"cross_attn_every", c.ar.cross_attn_every},
             {"cond_dropout", c.ar.cond_dropout},
             {"tau", c.ar.tau},
             {"text_width", c.ar.text_width},
             {"text_buckets", c.ar.text_buckets},
             {"top_k", c.ar.top_k},
             {"top_p", c.ar.top_p},
             {"temperature", c.ar.temperature},
             {"cfg_scale", c.ar.cfg_scale}};
  j["train"] = {{"vqvae_batch_size", c.train.vqvae_batch_size},
                {"ar_batch_size", c.train.ar_batch_size},
                {"vqvae_steps", c.train.vqvae_steps},
                {"ar_steps", c.train.ar_steps},
                {"lr", c.train.lr},
                {"vqvae_lr_schedule", c.train.vqvae_lr_schedule},
                {"ar_lr_schedule", c.train.ar_lr_schedule},
                {"weight_decay", c.train.weight_decay},
                {"checkpoint_every", c.train.checkpoint_every},
                {"log_every", c.train.log_every},
                {"views_per_step", c.train.views_per_step},
                {"n_critic", c.train.n_critic},
                {"revive_threshold", c.train.revive_threshold},
                {"revive_every", c.train.revive_every},
                {"val_assets", c.train.val_assets},
                {"target_psnr", c.train.target_psnr},
                {"target_utilization", c.train.target_utilization},
                {"resume_from", c.train.resume_from}};
  return j;
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  KeyReader r{j, ""};
  r.get_str("stage", c.stage);
  r.get_str("dataset", c.dataset);
  r.get_str("out_dir", c.out_dir);
  r.get_u64("seed", c.seed);
  r.get_int("threads", c.threads);
  r.get_str("vqvae_checkpoint", c.vqvae_checkpoint);
  r.get_str("ar_checkpoint", c.ar_checkpoint);
  r.get_str("field_path", c.field_path);
  r.get_str("prompt", c.prompt);
  r.get_u64("sample_seed", c.sample_seed);
  if (const json* s = r.sub("data")) read_data(*s, c.data);
  if (const json* s = r.sub("vqvae")) read_vqvae(*s, c.vqvae);
  if (const json* s = r.sub("loss")) read_loss(*s, c.loss);
  if (const json* s = r.sub("ar")) read_ar(*s, c.ar);
  if (const json* s = r.sub("train")) read_train(*s, c.train);
  r.finish();
  c.validate();
  return c;
}

RunConfig parse_config(const std::string& config_path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw IOError("cannot open config file: " + config_path);
    try {
      f >> j;
    } catch (const json::exception& e) {
      throw ArgumentError("config file " + config_path + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ArgumentError("config file must hold a JSON object");
  }
  for (const std::string& ov : overrides) {
    size_t eq = ov.find('=');
    check_arg(eq != std::string::npos && eq > 0, "override '" + ov + "': expected key=value");
    std::string path = ov.substr(0, eq);
    std::string raw = ov.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;  // bare strings allowed without quotes
    }
    json* node = &j;
    std::stringstream ss(path);
    std::string part, last;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    check_arg(!parts.empty(), "override '" + ov + "': empty key");
    for (size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
    (*node)[parts.back()] = value;
  }
  return config_from_json(j);
}

}  // namespace var3d
