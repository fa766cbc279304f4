// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moebqa/config.hpp"
#include "moebqa/model.hpp"
#include "moebqa/optim.hpp"

namespace moebqa {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian");

// File layout: magic "MOEBQA01", u32 LE header length, UTF-8 JSON header
// (version, config, training counters, parameter manifest with names,
// shapes and float offsets), f32 LE payload in manifest order, u32 LE CRC32
// of the payload bytes. Parameters come first, then optimizer first/second
// moments as "adam.m.<name>" / "adam.v.<name>" entries.
inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'E', 'B',
                                             'Q', 'A', '0', '1'};
inline constexpr int kCheckpointVersion = 1;

inline uint32_t crc32_ieee(const uint8_t* data, size_t len) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) {
        c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      }
      t[i] = c;
    }
    return t;
  }();
  uint32_t crc = 0xFFFFFFFFu;
  for (size_t i = 0; i < len; ++i) {
    crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  }
  return crc ^ 0xFFFFFFFFu;
}

struct ManifestEntry {
  std::string name;
  std::vector<int64_t> shape;
  int64_t offset = 0;  // in floats
  int64_t numel = 0;
};

struct Checkpoint {
  int version = kCheckpointVersion;
  TrainConfig config;
  uint64_t vocab_checksum = 0;
  int epoch = 0;          // completed epochs
  int64_t opt_step = 0;   // optimizer steps taken
  uint64_t seq_counter = 0;
  double best_val_acc = -1.0;
  int best_epoch = -1;
  std::vector<int64_t> load_counts;
  std::vector<ManifestEntry> manifest;
  std::vector<float> payload;
};

namespace ckpt_detail {

inline std::vector<int64_t> shape_dims(const Shape& s) {
  std::vector<int64_t> dims;
  for (int i = 0; i < s.rank(); ++i) dims.push_back(s.dim(i));
  return dims;
}

inline Shape dims_shape(const std::vector<int64_t>& dims) {
  if (dims.empty()) return Shape{};
  if (dims.size() == 1) return Shape(dims[0]);
  if (dims.size() == 2) return Shape(dims[0], dims[1]);
  throw CheckpointError(ErrorKind::kCheckpointMismatch,
                        "manifest shape rank > 2");
}

}  // namespace ckpt_detail

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model, const AdamW<T>& opt,
                           uint64_t vocab_checksum, int epoch,
                           int64_t opt_step, uint64_t seq_counter,
                           double best_val_acc, int best_epoch) {
  Checkpoint c;
  c.config = model.config();
  c.vocab_checksum = vocab_checksum;
  c.epoch = epoch;
  c.opt_step = opt_step;
  c.seq_counter = seq_counter;
  c.best_val_acc = best_val_acc;
  c.best_epoch = best_epoch;
  if (model.has_experts()) c.load_counts = model.experts().loads.counts;

  int64_t offset = 0;
  auto push = [&](const std::string& name, const Shape& shape,
                  std::span<const T> values) {
    ManifestEntry e{name, ckpt_detail::shape_dims(shape), offset,
                    static_cast<int64_t>(values.size())};
    offset += e.numel;
    c.manifest.push_back(std::move(e));
    for (T v : values) c.payload.push_back(static_cast<float>(v));
  };
  const auto& items = model.params().items();
  for (const auto& p : items) push(p.name, p.tensor.shape(), p.tensor.data());
  for (size_t i = 0; i < items.size(); ++i) {
    push("adam.m." + items[i].name, items[i].tensor.shape(),
         const_cast<AdamW<T>&>(opt).moment1(i));
  }
  for (size_t i = 0; i < items.size(); ++i) {
    push("adam.v." + items[i].name, items[i].tensor.shape(),
         const_cast<AdamW<T>&>(opt).moment2(i));
  }
  c.opt_step = opt_step;
  return c;
}

inline nlohmann::json checkpoint_header(const Checkpoint& c) {
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& e : c.manifest) {
    manifest.push_back({{"name", e.name},
                        {"shape", e.shape},
                        {"offset", e.offset},
                        {"numel", e.numel}});
  }
  return {{"version", c.version},
          {"config", to_json(c.config)},
          {"vocab_checksum", c.vocab_checksum},
          {"epoch", c.epoch},
          {"opt_step", c.opt_step},
          {"seq_counter", c.seq_counter},
          {"best_val_acc", c.best_val_acc},
          {"best_epoch", c.best_epoch},
          {"load_counts", c.load_counts},
          {"manifest", manifest}};
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write checkpoint file " + path);
  const std::string header = checkpoint_header(c).dump();
  out.write(kCheckpointMagic, 8);
  const auto hlen = static_cast<uint32_t>(header.size());
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  const auto* bytes = reinterpret_cast<const uint8_t*>(c.payload.data());
  const size_t nbytes = c.payload.size() * sizeof(float);
  out.write(reinterpret_cast<const char*>(bytes),
            static_cast<std::streamsize>(nbytes));
  const uint32_t crc = crc32_ieee(bytes, nbytes);
  out.write(reinterpret_cast<const char*>(&crc), 4);
  if (!out) throw InputError("short write to checkpoint file " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read checkpoint file " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw CheckpointError(ErrorKind::kCheckpointVersion,
                          path + ": bad magic, not a checkpoint");
  }
  uint32_t hlen = 0;
  if (!in.read(reinterpret_cast<char*>(&hlen), 4)) {
    throw CheckpointError(ErrorKind::kCheckpointTruncated,
                          path + ": truncated header length");
  }
  std::string header(hlen, '\0');
  if (!in.read(header.data(), hlen)) {
    throw CheckpointError(ErrorKind::kCheckpointTruncated,
                          path + ": truncated header");
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(ErrorKind::kCheckpointTruncated,
                          path + ": corrupt header: " + e.what());
  }

  Checkpoint c;
  c.version = j.at("version").get<int>();
  if (c.version != kCheckpointVersion) {
    throw CheckpointError(ErrorKind::kCheckpointVersion,
                          path + ": unsupported checkpoint version " +
                              std::to_string(c.version));
  }
  apply_json(c.config, j.at("config"));
  c.vocab_checksum = j.at("vocab_checksum").get<uint64_t>();
  c.epoch = j.at("epoch").get<int>();
  c.opt_step = j.at("opt_step").get<int64_t>();
  c.seq_counter = j.at("seq_counter").get<uint64_t>();
  c.best_val_acc = j.at("best_val_acc").get<double>();
  c.best_epoch = j.at("best_epoch").get<int>();
  c.load_counts = j.at("load_counts").get<std::vector<int64_t>>();
  int64_t total = 0;
  for (const auto& m : j.at("manifest")) {
    ManifestEntry e;
    e.name = m.at("name").get<std::string>();
    e.shape = m.at("shape").get<std::vector<int64_t>>();
    e.offset = m.at("offset").get<int64_t>();
    e.numel = m.at("numel").get<int64_t>();
    total += e.numel;
    c.manifest.push_back(std::move(e));
  }

  c.payload.resize(static_cast<size_t>(total));
  if (!in.read(reinterpret_cast<char*>(c.payload.data()),
               static_cast<std::streamsize>(total * 4))) {
    throw CheckpointError(ErrorKind::kCheckpointTruncated,
                          path + ": truncated payload");
  }
  uint32_t stored_crc = 0;
  if (!in.read(reinterpret_cast<char*>(&stored_crc), 4)) {
    throw CheckpointError(ErrorKind::kCheckpointTruncated,
                          path + ": missing checksum");
  }
  const uint32_t crc =
      crc32_ieee(reinterpret_cast<const uint8_t*>(c.payload.data()),
                 c.payload.size() * sizeof(float));
  if (crc != stored_crc) {
    throw CheckpointError(ErrorKind::kCheckpointChecksum,
                          path + ": payload checksum mismatch");
  }
  return c;
}

// Restores parameters, optimizer moments, and load counts. The destination
// model must have an identical parameter manifest; anything else is a
// configuration mismatch.
template <typename T>
void restore_checkpoint(const Checkpoint& c, Model<T>& model, AdamW<T>* opt) {
  const auto& items = model.params().items();
  const size_t n = items.size();
  const size_t expected = opt ? 3 * n : n;
  if (c.manifest.size() < expected) {
    throw CheckpointError(ErrorKind::kCheckpointMismatch,
                          "checkpoint manifest has " +
                              std::to_string(c.manifest.size()) +
                              " entries, model needs " + std::to_string(expected));
  }
  auto copy_into = [&](const ManifestEntry& e, std::span<T> dst) {
    if (static_cast<int64_t>(dst.size()) != e.numel) {
      throw CheckpointError(ErrorKind::kCheckpointMismatch,
                            "size mismatch for " + e.name);
    }
    for (int64_t i = 0; i < e.numel; ++i) {
      dst[static_cast<size_t>(i)] =
          static_cast<T>(c.payload[static_cast<size_t>(e.offset + i)]);
    }
  };
  for (size_t i = 0; i < n; ++i) {
    const auto& e = c.manifest[i];
    if (e.name != items[i].name ||
        ckpt_detail::dims_shape(e.shape) != items[i].tensor.shape()) {
      throw CheckpointError(ErrorKind::kCheckpointMismatch,
                            "parameter mismatch: checkpoint has \"" + e.name +
                                "\", model has \"" + items[i].name + "\"");
    }
    copy_into(e, items[i].tensor.data());
  }
  if (opt) {
    for (size_t i = 0; i < n; ++i) {
      const auto& em = c.manifest[n + i];
      const auto& ev = c.manifest[2 * n + i];
      if (em.name != "adam.m." + items[i].name ||
          ev.name != "adam.v." + items[i].name) {
        throw CheckpointError(ErrorKind::kCheckpointMismatch,
                              "optimizer manifest mismatch at " + items[i].name);
      }
      copy_into(em, opt->moment1(i));
      copy_into(ev, opt->moment2(i));
    }
    opt->set_step_count(c.opt_step);
  }
  if (model.has_experts()) {
    if (c.load_counts.size() != model.experts().loads.counts.size()) {
      throw CheckpointError(ErrorKind::kCheckpointMismatch,
                            "load counter size mismatch");
    }
    model.experts().loads.counts = c.load_counts;
  }
}

}  // namespace moebqa
