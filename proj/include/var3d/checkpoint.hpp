#pragma once

#include <map>
#include <string>

#include <json.hpp>

#include "var3d/nn.hpp"

namespace var3d {

// Named-parameter archive: magic, JSON header (config snapshot, step, blob
// directory), then raw little-endian float64 blobs.
struct Checkpoint {
  nlohmann::json header;  // free-form; "config" and "step" by convention
  std::map<std::string, std::pair<Shape, ArrayX>> blobs;

  void put(const std::string& name, const Shape& shape, ArrayX values);
  void put_params(const std::string& section, const ParamStore& ps);
  void put_adam(const std::string& section, AdamW& opt);

  const std::pair<Shape, ArrayX>& get(const std::string& name) const;
  bool has(const std::string& name) const { return blobs.count(name) > 0; }

  // Copies blobs under `section/` into matching parameters; throws StateError
  // listing every shape difference.
  void load_params(const std::string& section, ParamStore& ps) const;
  void load_adam(const std::string& section, AdamW& opt) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace var3d
