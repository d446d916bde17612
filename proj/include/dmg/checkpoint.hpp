// Checkpoint container: one JSON header line describing named entries,
// followed by a raw little-endian float32 payload in header order. The
// header's meta object carries whatever the writer wants to persist
// alongside the weights (model configuration, best metric, epoch).
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "dmg/tensor.hpp"

namespace dmg {

struct CheckpointEntry {
  Shape4 shape;
  std::vector<float> values;
};

class Checkpoint {
public:
  nlohmann::json meta;

  void add(const std::string& name, const Shape4& shape, const float* data) {
    require(!entries_.count(name), "checkpoint: duplicate entry " + name);
    CheckpointEntry e;
    e.shape = shape;
    e.values.assign(data, data + shape.numel());
    order_.push_back(name);
    entries_.emplace(name, std::move(e));
  }

  template <class T>
  void add(const std::string& name, const Tensor<T>& t) {
    std::vector<float> tmp(static_cast<size_t>(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) tmp[static_cast<size_t>(i)] = static_cast<float>(t.data()[i]);
    add(name, t.shape(), tmp.data());
  }

  const CheckpointEntry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) fail_missing("checkpoint: no entry named " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  const std::vector<std::string>& names() const { return order_; }

  void save(const std::filesystem::path& path) const {
    nlohmann::json header;
    header["format"] = "dmg-checkpoint";
    header["version"] = 1;
    header["meta"] = meta;
    auto& list = header["entries"] = nlohmann::json::array();
    int64_t offset = 0;
    for (const auto& name : order_) {
      const auto& e = entries_.at(name);
      list.push_back({{"name", name},
                      {"shape", {e.shape.b, e.shape.c, e.shape.h, e.shape.w}},
                      {"offset", offset},
                      {"count", e.shape.numel()}});
      offset += e.shape.numel();
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), "checkpoint: cannot open " + path.string() + " for writing");
    out << header.dump() << "\n";
    for (const auto& name : order_) {
      const auto& e = entries_.at(name);
      out.write(reinterpret_cast<const char*>(e.values.data()),
                static_cast<std::streamsize>(e.values.size() * sizeof(float)));
    }
    require(out.good(), "checkpoint: write failed for " + path.string());
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) fail_missing("checkpoint: cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded() || header.value("format", "") != "dmg-checkpoint") {
      fail_validation("checkpoint: " + path.string() + " has no valid header line");
    }
    require(header.value("version", 0) == 1, "checkpoint: unsupported version");
    Checkpoint ck;
    ck.meta = header.value("meta", nlohmann::json::object());
    std::streampos payload = in.tellg();
    for (const auto& item : header.at("entries")) {
      std::string name = item.at("name").get<std::string>();
      auto sh = item.at("shape");
      CheckpointEntry e;
      e.shape = Shape4{sh.at(0).get<int64_t>(), sh.at(1).get<int64_t>(), sh.at(2).get<int64_t>(),
                       sh.at(3).get<int64_t>()};
      int64_t count = item.at("count").get<int64_t>();
      require(count == e.shape.numel(), "checkpoint: entry " + name + " count/shape mismatch");
      e.values.resize(static_cast<size_t>(count));
      in.seekg(payload + std::streampos(item.at("offset").get<int64_t>() * sizeof(float)));
      in.read(reinterpret_cast<char*>(e.values.data()),
              static_cast<std::streamsize>(count * sizeof(float)));
      require(in.good(), "checkpoint: truncated payload in " + path.string());
      ck.order_.push_back(name);
      ck.entries_.emplace(std::move(name), std::move(e));
    }
    return ck;
  }

private:
  std::vector<std::string> order_;
  std::map<std::string, CheckpointEntry> entries_;
};

}  // namespace dmg
