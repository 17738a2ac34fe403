#include "var3d/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace var3d {

namespace {
constexpr char kMagic[8] = {'V', '3', 'D', 'C', 'K', 'P', 'T', '1'};
}

void Checkpoint::put(const std::string& name, const Shape& shape, ArrayX values) {
  check_arg(numel(shape) == values.size(), "checkpoint: blob size mismatch for " + name);
  blobs[name] = {shape, std::move(values)};
}

void Checkpoint::put_params(const std::string& section, const ParamStore& ps) {
  for (const auto& [name, t] : ps.all()) put(section + "/" + name, t.shape(), ArrayX(t.value()));
}

void Checkpoint::put_adam(const std::string& section, AdamW& opt) {
  header[section + "_step_count"] = opt.step_count();
  for (const auto& [name, slot] : opt.slots()) {
    if (slot.m.size() == 0) continue;
    put(section + "/m/" + name, {static_cast<int>(slot.m.size())}, ArrayX(slot.m));
    put(section + "/v/" + name, {static_cast<int>(slot.v.size())}, ArrayX(slot.v));
  }
}

const std::pair<Shape, ArrayX>& Checkpoint::get(const std::string& name) const {
  auto it = blobs.find(name);
  if (it == blobs.end()) throw StateError("checkpoint: missing blob " + name);
  return it->second;
}

void Checkpoint::load_params(const std::string& section, ParamStore& ps) const {
  std::ostringstream issues;
  int bad = 0;
  for (auto& [name, t] : ps.all()) {
    auto it = blobs.find(section + "/" + name);
    if (it == blobs.end()) {
      issues << "  missing: " << name << "\n";
      ++bad;
      continue;
    }
    if (it->second.first != t.shape()) {
      issues << "  " << name << ": checkpoint " << shape_str(it->second.first) << " vs model "
             << shape_str(t.shape()) << "\n";
      ++bad;
      continue;
    }
    t.raw_value() = it->second.second;
  }
  if (bad) throw StateError("checkpoint/model mismatch:\n" + issues.str());
}

void Checkpoint::load_adam(const std::string& section, AdamW& opt) const {
  if (header.contains(section + "_step_count"))
    opt.set_step_count(header.at(section + "_step_count").get<int64_t>());
  std::string prefix = section + "/m/";
  for (const auto& [name, blob] : blobs) {
    if (name.rfind(prefix, 0) != 0) continue;
    std::string pname = name.substr(prefix.size());
    AdamW::Slot& slot = opt.slots()[pname];
    slot.m = blob.second;
    slot.v = get(section + "/v/" + pname).second;
  }
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  nlohmann::json dir = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, blob] : ck.blobs) {
    dir.push_back({{"name", name}, {"shape", blob.first}, {"offset", offset}});
    offset += static_cast<uint64_t>(blob.second.size()) * sizeof(Scalar);
  }
  nlohmann::json header = ck.header;
  header["blob_dir"] = dir;
  std::string htext = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IOError("cannot open checkpoint for writing: " + path);
  f.write(kMagic, sizeof(kMagic));
  uint64_t hlen = htext.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& [name, blob] : ck.blobs)
    f.write(reinterpret_cast<const char*>(blob.second.data()),
            static_cast<std::streamsize>(blob.second.size() * sizeof(Scalar)));
  if (!f) throw IOError("short write: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IOError("cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (f.gcount() != sizeof(magic) || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
    throw IOError("not a var3d checkpoint: " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (f.gcount() != sizeof(hlen) || hlen == 0 || hlen > (1ull << 30))
    throw IOError("corrupt checkpoint header: " + path);
  std::string htext(hlen, '\0');
  f.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (f.gcount() != static_cast<std::streamsize>(hlen))
    throw IOError("truncated checkpoint header: " + path);
  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(htext);
  } catch (const nlohmann::json::exception& e) {
    throw IOError("corrupt checkpoint header json: " + path + ": " + e.what());
  }
  for (const auto& entry : ck.header.at("blob_dir")) {
    std::string name = entry.at("name").get<std::string>();
    Shape shape = entry.at("shape").get<Shape>();
    ArrayX values(numel(shape));
    std::streamsize bytes = static_cast<std::streamsize>(values.size() * sizeof(Scalar));
    f.read(reinterpret_cast<char*>(values.data()), bytes);
    if (f.gcount() != bytes) throw IOError("truncated checkpoint blob " + name + ": " + path);
    ck.blobs[name] = {shape, std::move(values)};
  }
  ck.header.erase("blob_dir");
  return ck;
}

}  // namespace var3d
