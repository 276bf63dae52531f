#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rfadvq/io/binary.hpp"
#include "rfadvq/nn/graph.hpp"

namespace rfadvq::io {

// Model checkpoint ("RFNN"): JSON metadata, named graphs (layer descriptor
// table followed by float32 parameter blobs) and named free tensors such as a
// codebook.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, nn::Graph<float>>> graphs;
  std::vector<std::pair<std::string, nn::Tensor<float>>> tensors;

  const nn::Graph<float>& graph(const std::string& name) const {
    for (const auto& [n, g] : graphs) {
      if (n == name) return g;
    }
    throw FormatError("checkpoint has no graph '" + name + "'");
  }
  const nn::Tensor<float>& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw FormatError("checkpoint has no tensor '" + name + "'");
  }
};

namespace detail {

inline void write_shape(BinaryWriter& w, const nn::Shape& s) {
  w.put<std::uint32_t>(std::uint32_t(s.size()));
  for (auto d : s) w.put<std::uint64_t>(d);
}

inline nn::Shape read_shape(BinaryReader& r) {
  const auto rank = r.get<std::uint32_t>();
  if (rank > 8) throw FormatError(r.what() + ": implausible tensor rank");
  nn::Shape s(rank);
  for (auto& d : s) {
    d = r.get<std::uint64_t>();
    if (d > (1ull << 32)) throw FormatError(r.what() + ": implausible dimension");
  }
  return s;
}

inline void write_tensor(BinaryWriter& w, const nn::Tensor<float>& t) {
  write_shape(w, t.shape());
  w.array<float>(t.values());
}

inline nn::Tensor<float> read_tensor(BinaryReader& r) {
  auto shape = read_shape(r);
  if (nn::shape_size(shape) > (1ull << 30)) throw FormatError(r.what() + ": tensor too large");
  nn::Tensor<float> t(std::move(shape));
  r.array<float>(t.values());
  return t;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  BinaryWriter w(os);
  w.magic("RFNN");
  w.put<std::uint32_t>(Checkpoint::kVersion);
  w.string(ck.metadata.dump());
  w.put<std::uint32_t>(std::uint32_t(ck.graphs.size()));
  for (const auto& [name, g] : ck.graphs) {
    w.string(name);
    detail::write_shape(w, g.input_shape());
    w.put<std::uint32_t>(std::uint32_t(g.layer_count()));
    for (std::size_t i = 0; i < g.layer_count(); ++i) {
      const auto spec = g.layer(i).spec();
      w.string(spec.kind);
      w.put<std::uint32_t>(std::uint32_t(spec.args.size()));
      for (auto a : spec.args) w.put<std::int64_t>(a);
    }
    for (std::size_t i = 0; i < g.layer_count(); ++i) {
      const auto& ps = g.layer(i).params();
      w.put<std::uint32_t>(std::uint32_t(ps.size()));
      for (const auto& p : ps) detail::write_tensor(w, p);
    }
  }
  w.put<std::uint32_t>(std::uint32_t(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    w.string(name);
    detail::write_tensor(w, t);
  }
  w.check("checkpoint");
}

inline Checkpoint read_checkpoint(std::istream& is, const std::string& what = "checkpoint") {
  BinaryReader r(is, what);
  r.expect_magic("RFNN");
  r.expect_version(Checkpoint::kVersion);
  Checkpoint ck;
  try {
    ck.metadata = nlohmann::json::parse(r.string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": bad metadata: " + e.what());
  }
  const auto ngraphs = r.get<std::uint32_t>();
  for (std::uint32_t gi = 0; gi < ngraphs; ++gi) {
    auto name = r.string();
    nn::Graph<float> g(detail::read_shape(r));
    const auto nlayers = r.get<std::uint32_t>();
    std::vector<nn::LayerSpec> specs(nlayers);
    for (auto& spec : specs) {
      spec.kind = r.string(256);
      const auto nargs = r.get<std::uint32_t>();
      if (nargs > 64) throw FormatError(what + ": implausible layer argument count");
      spec.args.resize(nargs);
      for (auto& a : spec.args) a = r.get<std::int64_t>();
    }
    for (const auto& spec : specs) {
      auto layer = nn::make_layer<float>(spec);
      const auto np = r.get<std::uint32_t>();
      if (np != layer->params().size()) {
        throw FormatError(what + ": parameter count mismatch for layer '" + spec.kind + "'");
      }
      for (auto& p : layer->params()) {
        auto t = detail::read_tensor(r);
        if (t.shape() != p.shape()) {
          throw FormatError(what + ": parameter shape mismatch for layer '" + spec.kind + "'");
        }
        p = std::move(t);
      }
      try {
        g.push(std::move(layer));
      } catch (const ShapeError& e) {
        throw FormatError(what + ": layer chain is inconsistent: " + e.what());
      }
    }
    ck.graphs.emplace_back(std::move(name), std::move(g));
  }
  const auto ntensors = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < ntensors; ++i) {
    auto name = r.string();
    ck.tensors.emplace_back(std::move(name), detail::read_tensor(r));
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_checkpoint(is, path.string());
}

}  // namespace rfadvq::io
