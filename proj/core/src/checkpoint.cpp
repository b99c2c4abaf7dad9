#include "safnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"

namespace safnet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename U>
U get(std::istream& is, const fs::path& path) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(v))) {
    throw CheckpointError(path.string() + ": truncated checkpoint");
  }
  return v;
}

}  // namespace

void write_atomically(const fs::path& path,
                      const std::function<void(std::ostream&)>& writer) {
  const fs::path parent = path.has_parent_path() ? path.parent_path() : fs::path(".");
  std::error_code ec;
  fs::create_directories(parent, ec);
  std::random_device rd;
  const fs::path tmp =
      parent / (path.filename().string() + ".tmp" + std::to_string(rd() % 1000000));
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError(tmp.string() + ": cannot open for writing");
    try {
      writer(os);
    } catch (...) {
      os.close();
      fs::remove(tmp, ec);
      throw;
    }
    os.flush();
    if (!os) {
      os.close();
      fs::remove(tmp, ec);
      throw IoError(path.string() + ": write failed");
    }
  }
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError(path.string() + ": cannot move temporary file into place");
  }
}

void write_archive(const fs::path& path, const Archive& archive) {
  json meta;
  meta["format"] = "safnet-checkpoint";
  meta["version"] = kCheckpointVersion;
  try {
    meta["config"] = json::parse(archive.config_json);
    meta["extra"] = json::parse(archive.extra_json);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata is not JSON: ") + e.what());
  }
  json arrays = json::array();
  for (const auto& [name, t] : archive.arrays) {
    arrays.push_back({{"name", name}, {"shape", {t.n(), t.c(), t.h(), t.w()}}});
  }
  meta["arrays"] = std::move(arrays);
  const std::string text = meta.dump();

  write_atomically(path, [&](std::ostream& os) {
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    put<std::uint32_t>(os, kCheckpointVersion);
    put<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : archive.arrays) {
      os.write(reinterpret_cast<const char*>(t.data()),
               static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
  });
}

Archive read_archive(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(path.string() + ": cannot open checkpoint");
  char magic[sizeof(kCheckpointMagic)];
  if (!is.read(magic, sizeof(magic)) ||
      std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw CheckpointError(path.string() + ": not a safnet checkpoint");
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " +
                          std::to_string(version));
  }
  const auto len = get<std::uint64_t>(is, path);
  if (len > (std::uint64_t(1) << 30)) throw CheckpointError(path.string() + ": bad header");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) {
    throw CheckpointError(path.string() + ": truncated header");
  }
  std::error_code ec;
  const auto file_size = fs::file_size(path, ec);
  std::uint64_t payload = 0;
  Archive archive;
  try {
    const json meta = json::parse(text);
    if (meta.at("format") != "safnet-checkpoint") {
      throw CheckpointError(path.string() + ": wrong format tag");
    }
    archive.config_json = meta.at("config").dump();
    archive.extra_json = meta.value("extra", json::object()).dump();
    for (const auto& a : meta.at("arrays")) {
      const auto shape = a.at("shape").get<std::vector<int>>();
      if (shape.size() != 4) throw CheckpointError(path.string() + ": bad array shape");
      std::uint64_t numel = 1;
      for (int d : shape) {
        if (d < 0) throw CheckpointError(path.string() + ": bad array shape");
        numel *= static_cast<std::uint64_t>(d);
      }
      payload += numel * sizeof(double);
      if (!ec && payload > file_size) {
        throw CheckpointError(path.string() + ": truncated array data");
      }
      TensorD t(Shape{shape[0], shape[1], shape[2], shape[3]});
      if (!is.read(reinterpret_cast<char*>(t.data()),
                   static_cast<std::streamsize>(t.size() * sizeof(double)))) {
        throw CheckpointError(path.string() + ": truncated array data");
      }
      archive.arrays.emplace_back(a.at("name").get<std::string>(), std::move(t));
    }
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": malformed header: " + e.what());
  } catch (const ShapeError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  return archive;
}

template <typename T>
void save_model(const fs::path& path, const ModelConfig& cfg, const Weights<T>& weights) {
  Archive a;
  a.config_json = cfg.to_json();
  a.arrays = weights.to_tensors();
  write_archive(path, a);
}

template <typename T>
SafNet<T> load_model(const fs::path& path) {
  Archive a = read_archive(path);
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(a.config_json);
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  std::vector<std::pair<std::string, TensorD>> params;
  for (auto& [name, t] : a.arrays) {
    if (name.rfind("optim.", 0) == 0) continue;
    params.emplace_back(name, std::move(t));
  }
  return SafNet<T>(cfg, Weights<T>::from_tensors(cfg, params));
}

template void save_model(const fs::path&, const ModelConfig&, const Weights<float>&);
template void save_model(const fs::path&, const ModelConfig&, const Weights<double>&);
template SafNet<float> load_model(const fs::path&);
template SafNet<double> load_model(const fs::path&);

}  // namespace safnet
