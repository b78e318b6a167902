#include "flm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "flm/error.hpp"

namespace flm {

namespace {

constexpr char kMagic[8] = {'F', 'L', 'M', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.put(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
  }
}

template <typename T>
T read_le(std::istream& in) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = in.get();
    if (c == EOF) throw ValidationError("checkpoint: truncated header");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<T>(v);
}

void write_doubles(std::ostream& out, std::span<const double> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(double)));
  } else {
    for (double v : values) write_le(out, std::bit_cast<std::uint64_t>(v));
  }
}

void read_doubles(std::istream& in, std::span<double> values) {
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw ValidationError("checkpoint: truncated payload");
  } else {
    for (double& v : values) v = std::bit_cast<double>(read_le<std::uint64_t>(in));
  }
}

}  // namespace

void save_checkpoint(const Model& model, const std::string& path, const nlohmann::json& metadata) {
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  const auto params = model.parameters();
  for (const auto& p : params) {
    tensors.push_back({{"name", p.name},
                       {"shape", p.tensor.shape()},
                       {"offset", offset},
                       {"count", p.tensor.numel()}});
    offset += p.tensor.numel();
  }
  nlohmann::json header = {
      {"format", "flm-checkpoint"},
      {"version", kCheckpointVersion},
      {"config", model.config()},
      {"multipliers",
       {{"input_mult", model.multipliers().input_mult},
        {"output_mult", model.multipliers().output_mult}}},
      {"tensors", tensors},
      {"metadata", metadata},
  };
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path);
  out.write(kMagic, sizeof(kMagic));
  write_le<std::uint32_t>(out, kCheckpointVersion);
  write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params) write_doubles(out, p.tensor.data());
  if (!out) throw Error("failed writing checkpoint " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ValidationError(path + ": not an flm checkpoint");
  }
  const auto version = read_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw ValidationError(path + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = read_le<std::uint64_t>(in);
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ValidationError(path + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": bad header: " + e.what());
  }
  const ModelConfig config = header.at("config").get<ModelConfig>();
  validate(config, true);
  Multipliers mult{header.at("multipliers").at("input_mult").get<double>(),
                   header.at("multipliers").at("output_mult").get<double>()};

  // Build an empty model of the right shape, then fill it in order.
  Model model(config, mult);
  const auto d = static_cast<std::size_t>(config.hidden_size);
  const auto f = static_cast<std::size_t>(config.ffn_hidden_size);
  const auto V = static_cast<std::size_t>(config.vocab_size);
  auto param = [](Shape s) { return Tensor(std::move(s), true); };
  model.embedding = param({V, d});
  for (std::int64_t i = 0; i < config.layer_num; ++i) {
    model.layers.push_back({param({d}), param({d, d}), param({d, d}), param({d, d}),
                            param({d, d}), param({d}), param({d, f}), param({d, f}),
                            param({f, d})});
  }
  model.final_norm_gain = param({d});
  model.final_norm_bias = param({d});
  model.lm_head = param({d, V});

  const auto& entries = header.at("tensors");
  auto params = model.parameters();
  if (entries.size() != params.size()) {
    throw ValidationError(path + ": tensor table does not match the config");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    if (e.at("name").get<std::string>() != params[i].name ||
        e.at("shape").get<Shape>() != params[i].tensor.shape()) {
      throw ValidationError(path + ": unexpected tensor " + e.at("name").get<std::string>());
    }
    read_doubles(in, params[i].tensor.data());
  }
  return {std::move(model), header.value("metadata", nlohmann::json::object())};
}

}  // namespace flm
