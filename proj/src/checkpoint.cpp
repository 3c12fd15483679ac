#include "popmeta/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "popmeta/hash.hpp"

namespace popmeta {

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b;
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b.data(), 8);
}

std::uint64_t get_u64(std::istream& in) {
  std::array<unsigned char, 8> b{};
  in.read(reinterpret_cast<char*>(b.data()), 8);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[static_cast<std::size_t>(i)];
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : ckpt.model.params.segments()) {
    segs.push_back({{"name", s.name}, {"rows", s.value.rows()}, {"cols", s.value.cols()}});
  }
  const nlohmann::json header = {{"arch", ckpt.model.arch.to_json()},
                                 {"world_hash", hex64(ckpt.world_hash)},
                                 {"metadata", ckpt.metadata},
                                 {"segments", segs}};
  const std::string text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path);
    out.write(kCheckpointMagic, 8);
    put_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& s : ckpt.model.params.segments()) {
      for (double v : s.value.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    if (!out) throw std::runtime_error("failed writing checkpoint " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("cannot move checkpoint into place: " + path);
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw std::runtime_error("not a popmeta checkpoint (bad magic): " + path);
  }
  const std::uint64_t len = get_u64(in);
  if (len > (1u << 26)) throw std::runtime_error("checkpoint: implausible header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(text);

  Checkpoint ck;
  ck.model.arch = AgentArch::from_json(header.at("arch"));
  ck.world_hash = std::stoull(header.at("world_hash").get<std::string>(), nullptr, 16);
  ck.metadata = header.value("metadata", nlohmann::json::object());
  for (const auto& s : header.at("segments")) {
    Tensor t(s.at("rows").get<std::size_t>(), s.at("cols").get<std::size_t>());
    for (double& v : t.data()) v = std::bit_cast<double>(get_u64(in));
    ck.model.params.add(s.at("name").get<std::string>(), std::move(t));
  }
  // A freshly initialised model fixes the expected segment layout.
  Rng probe(0);
  const Model ref = Model::init(ck.model.arch, probe);
  const auto& a = ref.params.segments();
  const auto& b = ck.model.params.segments();
  bool ok = a.size() == b.size();
  for (std::size_t i = 0; ok && i < a.size(); ++i) {
    ok = a[i].name == b[i].name && a[i].value.rows() == b[i].value.rows() &&
         a[i].value.cols() == b[i].value.cols();
  }
  if (!ok) throw std::runtime_error("checkpoint segments do not match the declared architecture");
  return ck;
}

}  // namespace popmeta
