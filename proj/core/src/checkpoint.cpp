#include "cvrnet/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "cvrnet/config.hpp"

namespace cvrnet {

namespace {

constexpr char kMagic[4] = {'C', 'V', 'R', 'N'};
constexpr const char* kAdamPrefix = "opt.adam.";

void write_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) throw FormatError("truncated checkpoint: " + path);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_record(std::ostream& out, const std::string& name, const Shape& shape,
                  const float* data) {
  write_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(out, static_cast<std::uint32_t>(shape.size()));
  std::int64_t numel = 1;
  for (const std::int64_t e : shape) {
    write_u32(out, static_cast<std::uint32_t>(e));
    numel *= e;
  }
  out.write(reinterpret_cast<const char*>(data), numel * 4);
}

struct Record {
  Shape shape;
  std::vector<float> data;
};

struct ParsedCheckpoint {
  std::string config_text;
  std::vector<std::string> order;
  std::map<std::string, Record> records;
};

/// Reads and validates the whole file before anything is mutated.
ParsedCheckpoint parse_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);

  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("bad checkpoint magic in " + path);
  }
  const std::uint32_t version = read_u32(in, path);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  }
  const std::uint32_t cfg_len = read_u32(in, path);
  ParsedCheckpoint parsed;
  parsed.config_text.resize(cfg_len);
  in.read(parsed.config_text.data(), cfg_len);
  if (static_cast<std::uint32_t>(in.gcount()) != cfg_len) {
    throw FormatError("truncated checkpoint config in " + path);
  }

  while (in.peek() != EOF) {
    const std::uint32_t name_len = read_u32(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (static_cast<std::uint32_t>(in.gcount()) != name_len) {
      throw FormatError("truncated checkpoint record name in " + path);
    }
    const std::uint32_t rank = read_u32(in, path);
    if (rank < 1 || rank > 8) throw FormatError("implausible record rank in " + path);
    Record rec;
    std::int64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint32_t e = read_u32(in, path);
      if (e < 1) throw FormatError("record extent < 1 in " + path);
      rec.shape.push_back(e);
      numel *= e;
    }
    rec.data.resize(static_cast<std::size_t>(numel));
    in.read(reinterpret_cast<char*>(rec.data.data()), numel * 4);
    if (in.gcount() != numel * 4) throw FormatError("truncated checkpoint payload in " + path);
    if (parsed.records.count(name)) throw FormatError("duplicate record '" + name + "' in " + path);
    parsed.order.push_back(name);
    parsed.records.emplace(std::move(name), std::move(rec));
  }
  return parsed;
}

void restore_adam(const ParsedCheckpoint& parsed, const CvrNet& model, AdamState& opt) {
  opt.init_like(model.params(), /*amsgrad=*/false);
  const auto t_it = parsed.records.find(std::string(kAdamPrefix) + "t");
  if (t_it == parsed.records.end()) return;  // checkpoint carries no optimizer state
  opt.step = static_cast<std::int64_t>(t_it->second.data.at(0));
  const auto& ps = model.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& e = ps.entry_at(i);
    if (!e.trainable) continue;
    for (const char* kind : {"m", "v"}) {
      const std::string key = std::string(kAdamPrefix) + kind + "." + e.name;
      const auto it = parsed.records.find(key);
      if (it == parsed.records.end()) {
        throw FormatError("checkpoint optimizer state lacks " + key);
      }
      if (it->second.shape != e.value.shape()) {
        throw MismatchError("optimizer record " + key + " has shape " +
                            shape_str(it->second.shape) + ", parameter is " +
                            shape_str(e.value.shape()));
      }
      TensorT<float>& dst = kind[0] == 'm' ? opt.m[i] : opt.v[i];
      std::copy(it->second.data.begin(), it->second.data.end(), dst.data());
    }
  }
}

}  // namespace

std::string model_config_text(const ModelConfig& config, std::uint64_t seed) {
  std::ostringstream out;
  out << "dtype=float32\n";
  out << "input_h=" << config.input_h << "\n";
  out << "input_w=" << config.input_w << "\n";
  out << "num_classes=" << config.num_classes << "\n";
  out << "seed=" << seed << "\n";
  out << "width_multiplier=" << config.width.str() << "\n";
  return out.str();
}

ModelConfig model_config_from_text(const std::string& text, std::uint64_t* seed) {
  const KeyValueConfig kv = KeyValueConfig::parse(text);
  ModelConfig cfg;
  cfg.input_h = static_cast<int>(kv.get_int("input_h"));
  cfg.input_w = static_cast<int>(kv.get_int("input_w"));
  cfg.num_classes = static_cast<int>(kv.get_int("num_classes"));
  cfg.width = WidthMultiplier::parse(kv.get("width_multiplier"));
  if (seed) *seed = static_cast<std::uint64_t>(std::stoull(kv.get_or("seed", "0")));
  return cfg;
}

void save_checkpoint(const CvrNet& model, const std::string& path, const AdamState* opt_state,
                     std::uint64_t seed) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + tmp);
    out.write(kMagic, 4);
    write_u32(out, kCheckpointVersion);
    const std::string cfg = model_config_text(model.config(), seed);
    write_u32(out, static_cast<std::uint32_t>(cfg.size()));
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

    const auto& ps = model.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const auto& e = ps.entry_at(i);
      write_record(out, e.name, e.value.shape(), e.value.data());
    }
    if (opt_state && !opt_state->m.empty()) {
      const float t = static_cast<float>(opt_state->step);
      write_record(out, std::string(kAdamPrefix) + "t", {1}, &t);
      for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& e = ps.entry_at(i);
        if (!e.trainable) continue;
        write_record(out, std::string(kAdamPrefix) + "m." + e.name, e.value.shape(),
                     opt_state->m[i].data());
        write_record(out, std::string(kAdamPrefix) + "v." + e.name, e.value.shape(),
                     opt_state->v[i].data());
      }
    }
    if (!out) throw IoError("failed writing checkpoint: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

namespace {

void apply_full(CvrNet& model, const ParsedCheckpoint& parsed) {
  const KeyValueConfig theirs = KeyValueConfig::parse(parsed.config_text);
  const KeyValueConfig ours = KeyValueConfig::parse(model_config_text(model.config(), 0));
  for (const auto& [key, value] : ours.values()) {
    if (key == "seed") continue;  // not part of the architecture
    if (theirs.get_or(key, "") != value) {
      throw MismatchError("checkpoint config mismatch at '" + key + "': checkpoint has '" +
                          theirs.get_or(key, "<missing>") + "', model needs '" + value + "'");
    }
  }

  auto& ps = model.params();
  // validate everything first so failure cannot leave partial state
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& e = ps.entry_at(i);
    const auto it = parsed.records.find(e.name);
    if (it == parsed.records.end()) {
      throw MismatchError("checkpoint lacks parameter '" + e.name + "'");
    }
    if (it->second.shape != e.value.shape()) {
      throw MismatchError("checkpoint parameter '" + e.name + "' has shape " +
                          shape_str(it->second.shape) + ", model needs " +
                          shape_str(e.value.shape()));
    }
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& e = ps.entry_at(i);
    const auto& rec = parsed.records.at(e.name);
    std::copy(rec.data.begin(), rec.data.end(), e.value.data());
  }
}

}  // namespace

CvrNet load_checkpoint(const std::string& path, AdamState* opt_state, std::uint64_t* seed) {
  const ParsedCheckpoint parsed = parse_checkpoint(path);
  std::uint64_t stored_seed = 0;
  const ModelConfig cfg = model_config_from_text(parsed.config_text, &stored_seed);
  CvrNet model(cfg, stored_seed);
  apply_full(model, parsed);
  if (opt_state) restore_adam(parsed, model, *opt_state);
  if (seed) *seed = stored_seed;
  return model;
}

void load_checkpoint_into(CvrNet& model, const std::string& path) {
  apply_full(model, parse_checkpoint(path));
}

PartialLoadReport load_checkpoint_partial(CvrNet& model, const std::string& path) {
  const ParsedCheckpoint parsed = parse_checkpoint(path);
  PartialLoadReport report;

  auto& ps = model.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& e = ps.entry_at(i);
    const auto it = parsed.records.find(e.name);
    if (it == parsed.records.end()) {
      report.missing_in_file.push_back(e.name);
      continue;
    }
    if (it->second.shape != e.value.shape()) {
      report.rejected_shape.push_back(e.name + ": checkpoint " + shape_str(it->second.shape) +
                                      " vs model " + shape_str(e.value.shape()));
      continue;
    }
    std::copy(it->second.data.begin(), it->second.data.end(), e.value.data());
    report.imported.push_back(e.name);
  }
  for (const std::string& name : parsed.order) {
    if (name.rfind(kAdamPrefix, 0) == 0) continue;
    if (!ps.has(name)) report.unmatched_in_file.push_back(name);
  }
  return report;
}

}  // namespace cvrnet
