#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "tcpl/common.hpp"
#include "tcpl/model.hpp"
#include "tcpl/selftrain.hpp"

namespace tcpl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_json;  // resolved run config snapshot
  int epoch = 0;
  Model model;
  std::optional<std::vector<std::vector<double>>> optimizer;  // velocities
  PseudoLabeledSet plt;  // pseudo-labels live across the epoch boundary
  std::array<std::uint64_t, 4> rng_state{};
};

namespace detail {

struct BinWriter {
  std::ofstream out;

  explicit BinWriter(const std::filesystem::path& path)
      : out(path, std::ios::binary) {
    if (!out) throw io_error("cannot open for writing: " + path.string());
  }
  void raw(const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void i32(std::int32_t v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void doubles(const std::vector<double>& v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(double));
  }
};

struct BinReader {
  std::ifstream in;
  std::filesystem::path path;

  explicit BinReader(const std::filesystem::path& p)
      : in(p, std::ios::binary), path(p) {
    if (!in) throw io_error("cannot open for reading: " + p.string());
  }
  void raw(void* p, std::size_t n) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (in.gcount() != static_cast<std::streamsize>(n))
      throw io_error("truncated checkpoint: " + path.string());
  }
  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, 8);
    return v;
  }
  std::int32_t i32() {
    std::int32_t v;
    raw(&v, 4);
    return v;
  }
  double f64() {
    double v;
    raw(&v, 8);
    return v;
  }
  std::string str() {
    std::string s(u64(), '\0');
    raw(s.data(), s.size());
    return s;
  }
  std::vector<double> doubles() {
    std::vector<double> v(u64());
    raw(v.data(), v.size() * sizeof(double));
    return v;
  }
};

inline void write_verdict(BinWriter& w, const CommitteeVerdict& v) {
  w.str(v.sample_id);
  w.i32(v.base_pred);
  w.u64(v.per_view.size());
  for (const ViewRecord& r : v.per_view) {
    w.f64(r.confidence);
    w.i32(r.pred);
    w.i32(r.top_prototype);
  }
  w.u8(v.criteria.confidence);
  w.u8(v.criteria.prediction);
  w.u8(v.criteria.prototype);
  w.u8(v.consistent);
}

inline CommitteeVerdict read_verdict(BinReader& r) {
  CommitteeVerdict v;
  v.sample_id = r.str();
  v.base_pred = r.i32();
  v.per_view.resize(r.u64());
  for (ViewRecord& rec : v.per_view) {
    rec.confidence = r.f64();
    rec.pred = r.i32();
    rec.top_prototype = r.i32();
  }
  v.criteria.confidence = r.u8() != 0;
  v.criteria.prediction = r.u8() != 0;
  v.criteria.prototype = r.u8() != 0;
  v.consistent = r.u8() != 0;
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path,
                            const Checkpoint& ckpt) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    detail::BinWriter w(tmp);
    w.raw("TCPL", 4);
    w.u32(ckpt.version);
    w.str(ckpt.config_json);
    w.i32(ckpt.epoch);

    const Backbone& bb = ckpt.model.backbone;
    w.i32(static_cast<std::int32_t>(bb.layers.size()));
    for (const ConvLayer& l : bb.layers) {
      w.i32(l.in_c);
      w.i32(l.out_c);
      w.i32(l.ksize);
      w.i32(l.stride);
      w.i32(l.pad);
      w.u8(l.relu ? 1 : 0);
      w.doubles(l.w);
      w.doubles(l.b);
    }

    const PrototypeBank& bank = ckpt.model.bank;
    w.i32(bank.per_class);
    w.i32(bank.classes);
    w.i32(bank.depth);
    for (int j = 0; j < bank.count(); ++j) w.i32(bank.class_of(j));
    w.doubles(bank.p);
    for (int j = 0; j < bank.count(); ++j) {
      const auto& prov = bank.provenance[static_cast<std::size_t>(j)];
      w.u8(prov ? 1 : 0);
      if (!prov) continue;
      w.str(prov->sample_id);
      w.u8(prov->domain == Domain::target ? 1 : 0);
      w.i32(prov->level);
      w.i32(prov->row);
      w.i32(prov->col);
      w.f64(prov->similarity);
    }

    w.i32(ckpt.model.head.classes);
    w.i32(ckpt.model.head.protos);
    w.doubles(ckpt.model.head.w);

    w.u64(ckpt.model.pool_sizes.size());
    for (int k : ckpt.model.pool_sizes) w.i32(k);

    w.u8(ckpt.optimizer ? 1 : 0);
    if (ckpt.optimizer) {
      w.u64(ckpt.optimizer->size());
      for (const auto& slot : *ckpt.optimizer) w.doubles(slot);
    }

    w.i32(ckpt.plt.epoch);
    w.u64(ckpt.plt.entries.size());
    for (const auto& [id, entry] : ckpt.plt.entries) {
      w.str(id);
      w.i32(entry.pseudo_label);
      w.i32(entry.epoch_assigned);
      detail::write_verdict(w, entry.verdict);
    }

    for (std::uint64_t word : ckpt.rng_state) w.u64(word);
    if (!w.out) throw io_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  detail::BinReader r(path);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "TCPL", 4) != 0)
    throw io_error("not a checkpoint file: " + path.string());
  Checkpoint ckpt;
  ckpt.version = r.u32();
  if (ckpt.version != kCheckpointVersion)
    throw io_error("unsupported checkpoint version " +
                   std::to_string(ckpt.version));
  ckpt.config_json = r.str();
  ckpt.epoch = r.i32();

  const int n_layers = r.i32();
  ckpt.model.backbone.layers.resize(static_cast<std::size_t>(n_layers));
  for (ConvLayer& l : ckpt.model.backbone.layers) {
    l.in_c = r.i32();
    l.out_c = r.i32();
    l.ksize = r.i32();
    l.stride = r.i32();
    l.pad = r.i32();
    l.relu = r.u8() != 0;
    l.w = r.doubles();
    l.b = r.doubles();
  }

  PrototypeBank& bank = ckpt.model.bank;
  bank.per_class = r.i32();
  bank.classes = r.i32();
  bank.depth = r.i32();
  for (int j = 0; j < bank.count(); ++j)
    if (r.i32() != bank.class_of(j))
      throw io_error("checkpoint class_of map violates block layout");
  bank.p = r.doubles();
  bank.provenance.assign(static_cast<std::size_t>(bank.count()), std::nullopt);
  for (int j = 0; j < bank.count(); ++j) {
    if (r.u8() == 0) continue;
    Provenance prov;
    prov.sample_id = r.str();
    prov.domain = r.u8() != 0 ? Domain::target : Domain::source;
    prov.level = r.i32();
    prov.row = r.i32();
    prov.col = r.i32();
    prov.similarity = r.f64();
    bank.provenance[static_cast<std::size_t>(j)] = std::move(prov);
  }

  ckpt.model.head.classes = r.i32();
  ckpt.model.head.protos = r.i32();
  ckpt.model.head.w = r.doubles();

  ckpt.model.pool_sizes.resize(r.u64());
  for (int& k : ckpt.model.pool_sizes) k = r.i32();

  if (r.u8() != 0) {
    std::vector<std::vector<double>> slots(r.u64());
    for (auto& slot : slots) slot = r.doubles();
    ckpt.optimizer = std::move(slots);
  }

  ckpt.plt.epoch = r.i32();
  const std::uint64_t n_entries = r.u64();
  for (std::uint64_t i = 0; i < n_entries; ++i) {
    std::string id = r.str();
    PseudoLabelEntry entry;
    entry.pseudo_label = r.i32();
    entry.epoch_assigned = r.i32();
    entry.verdict = detail::read_verdict(r);
    ckpt.plt.entries.emplace(std::move(id), std::move(entry));
  }

  for (std::uint64_t& word : ckpt.rng_state) word = r.u64();
  return ckpt;
}

}  // namespace tcpl
