#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <fmt/format.h>

#include "bard/nanolm.hpp"

namespace bard::nanolm {
namespace {

constexpr char kMagic[8] = {'B', 'A', 'R', 'D', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("checkpoint is truncated");
  return v;
}

std::string get_string(std::istream& in, std::size_t n) {
  if (n > (1u << 30)) throw std::runtime_error("checkpoint string length is implausible");
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw std::runtime_error("checkpoint is truncated");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params, const CheckpointHeader& header) {
  if (header.config != params.config()) throw std::invalid_argument("checkpoint header config does not match params");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", tmp));
    const nlohmann::json h = {
        {"config", header.config}, {"vocab_hash", header.vocab_hash}, {"step", header.step}, {"extra", header.extra}};
    const auto text = h.dump();
    out.write(kMagic, sizeof kMagic);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    put<std::uint64_t>(out, params.layout().size());
    for (const auto& p : params.layout()) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
      out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(p.shape.size()));
      for (auto dim : p.shape) put<std::uint64_t>(out, dim);
      const auto data = params.array(p.name);
      out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
    }
    if (!out) throw std::runtime_error(fmt::format("failed writing {}", tmp));
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open checkpoint {}", path.string()));
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw std::runtime_error(fmt::format("{} is not a checkpoint", path.string()));

  const auto h = nlohmann::json::parse(get_string(in, get<std::uint64_t>(in)));
  CheckpointHeader header;
  header.config = h.at("config").get<ModelConfig>();
  header.vocab_hash = h.at("vocab_hash").get<std::string>();
  header.step = h.at("step").get<long>();
  header.extra = h.value("extra", nlohmann::json::object());

  ParameterStore params{header.config};
  const auto count = get<std::uint64_t>(in);
  if (count != params.layout().size())
    throw std::runtime_error(fmt::format("checkpoint has {} arrays, expected {}", count, params.layout().size()));
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name = get_string(in, get<std::uint32_t>(in));
    const auto& info = params.info(name);
    const auto rank = get<std::uint32_t>(in);
    std::vector<std::size_t> shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(get<std::uint64_t>(in));
    if (shape != info.shape) throw std::runtime_error(fmt::format("shape mismatch for '{}'", name));
    auto data = params.array(name);
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size_bytes())))
      throw std::runtime_error("checkpoint is truncated");
  }
  return {std::move(params), std::move(header)};
}

}  // namespace bard::nanolm
