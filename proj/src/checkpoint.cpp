// SPDX-License-Identifier: Apache-2.0
#include "treerpo/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace treerpo {

namespace {

constexpr char kMagic[4] = {'T', 'R', 'P', 'O'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void write_f64(std::ostream& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  write_u64(out, bits);
}

double read_f64(std::istream& in) {
  std::uint64_t bits = read_u64(in);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace

void save_checkpoint(const std::string& path, const PolicyModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open checkpoint for writing: " + path);

  nlohmann::json header;
  header["config"] = {{"vocab_size", model.config.vocab_size},
                      {"embed_dim", model.config.embed_dim},
                      {"n_layers", model.config.n_layers},
                      {"n_heads", model.config.n_heads},
                      {"hidden_dim", model.config.hidden_dim},
                      {"max_seq_len", model.config.max_seq_len},
                      {"init_scale", model.config.init_scale},
                      {"head_gain_init", model.config.head_gain_init},
                      {"logit_temperature", model.config.logit_temperature}};
  header["vocab"] = {{"tokens", model.vocab.tokens},
                     {"mask_id", model.vocab.mask_id},
                     {"pad_id", model.vocab.pad_id}};
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, value] : model.params)
    params.push_back({{"name", name}, {"rows", value.rows()}, {"cols", value.cols()}});
  header["params"] = params;
  std::string header_str = header.dump();

  out.write(kMagic, 4);
  write_u32(out, kVersion);
  write_u64(out, header_str.size());
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, value] : model.params)
    for (Eigen::Index r = 0; r < value.rows(); ++r)
      for (Eigen::Index c = 0; c < value.cols(); ++c) write_f64(out, value(r, c));
  if (!out) throw ConfigError("checkpoint write failed: " + path);
}

PolicyModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);

  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw ConfigError("not a checkpoint file: " + path);
  std::uint32_t version = read_u32(in);
  if (version != kVersion)
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  std::uint64_t header_len = read_u64(in);
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ConfigError("truncated checkpoint header: " + path);
  nlohmann::json header = nlohmann::json::parse(header_str);

  PolicyModel m;
  const auto& cfg = header.at("config");
  m.config.vocab_size = cfg.at("vocab_size").get<int>();
  m.config.embed_dim = cfg.at("embed_dim").get<int>();
  m.config.n_layers = cfg.at("n_layers").get<int>();
  m.config.n_heads = cfg.at("n_heads").get<int>();
  m.config.hidden_dim = cfg.at("hidden_dim").get<int>();
  m.config.max_seq_len = cfg.at("max_seq_len").get<int>();
  m.config.init_scale = cfg.at("init_scale").get<double>();
  m.config.head_gain_init = cfg.at("head_gain_init").get<double>();
  m.config.logit_temperature = cfg.at("logit_temperature").get<double>();
  const auto& voc = header.at("vocab");
  m.vocab.tokens = voc.at("tokens").get<std::vector<std::string>>();
  m.vocab.mask_id = voc.at("mask_id").get<int>();
  m.vocab.pad_id = voc.at("pad_id").get<int>();
  m.config.validate();
  m.vocab.validate();

  for (const auto& p : header.at("params")) {
    std::string name = p.at("name").get<std::string>();
    Eigen::Index rows = p.at("rows").get<Eigen::Index>();
    Eigen::Index cols = p.at("cols").get<Eigen::Index>();
    Matrix value(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) value(r, c) = read_f64(in);
    if (!value.allFinite()) throw ConfigError("non-finite parameter in checkpoint: " + name);
    m.params[name] = std::move(value);
  }
  if (!in) throw ConfigError("truncated checkpoint data: " + path);
  return m;
}

}  // namespace treerpo
