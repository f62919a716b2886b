#pragma once

// Checkpoint container. Byte layout (all integers little-endian):
//
//   char[8]   magic "LRCNNCKP"
//   u32       format version (1)
//   u32       scalar width in bytes (4 = float32, 8 = float64)
//   u32       metadata length N, followed by N bytes of UTF-8 JSON
//   u32       tensor count T
//   T x       { u32 rows, u32 cols, rows*cols scalars in column-major order }
//             parameter tensors in model order: (W, b) per embedding layer,
//             classification head (W, b), regression head (W, b)
//   T x       momentum buffers, same shapes and order
//
// The metadata records the model shape, encoding, class list, anchors,
// iteration/epoch counters, training config hash and the RNG state.

#include "json.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "lidar_rcnn/dataset.hpp"
#include "lidar_rcnn/encoding.hpp"
#include "lidar_rcnn/errors.hpp"
#include "lidar_rcnn/network.hpp"

namespace lidar_rcnn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'L', 'R', 'C', 'N', 'N', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  EncodingConfig encoding;
  std::vector<std::string> classes;
  AnchorTable anchors;
  std::int64_t iteration = 0;
  int epoch = 0;  // completed epochs
  std::uint64_t config_hash = 0;
  std::string rng_state;
};

template <typename Scalar>
struct TrainingState {
  PointNetModel<Scalar> model;
  OptimizerState<Scalar> optimizer;
};

struct Checkpoint {
  CheckpointMeta meta;
  std::variant<TrainingState<float>, TrainingState<double>> state;

  bool is_double() const { return std::holds_alternative<TrainingState<double>>(state); }
  const ModelShape& shape() const {
    return std::visit([](const auto& s) -> const ModelShape& { return s.model.shape; }, state);
  }
  std::size_t parameter_count() const {
    return std::visit([](const auto& s) { return s.model.parameter_count(); }, state);
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

template <typename Scalar, typename Tensor>
void put_tensor(std::string& out, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(t.rows()));
  put_u32(out, static_cast<std::uint32_t>(t.cols()));
  out.append(reinterpret_cast<const char*>(t.data()),
             static_cast<std::size_t>(t.size()) * sizeof(Scalar));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  void read(void* dst, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw SchemaError("checkpoint: truncated file");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    read(&v, 4);
    return v;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

template <typename Scalar, typename Tensor>
void get_tensor(Reader& r, Tensor& t) {
  const std::uint32_t rows = r.u32();
  const std::uint32_t cols = r.u32();
  if (rows != static_cast<std::uint32_t>(t.rows()) || cols != static_cast<std::uint32_t>(t.cols())) {
    throw SchemaError("checkpoint: tensor shape does not match the recorded model shape");
  }
  r.read(t.data(), static_cast<std::size_t>(t.size()) * sizeof(Scalar));
}

inline json anchors_to_json(const AnchorTable& a) {
  json out = json::object();
  for (const auto& [cls, s] : a.entries()) out[cls] = {s.w, s.l, s.h};
  return out;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  const CheckpointMeta& m = ck.meta;
  const ModelShape& shape = ck.shape();
  const json meta = {
      {"variant", std::string(variant_name(m.encoding.variant))},
      {"points_per_proposal", m.encoding.points_per_proposal},
      {"enlarge_wl", m.encoding.enlarge_wl},
      {"virtual_grid", m.encoding.virtual_grid},
      {"classes", m.classes},
      {"anchors", detail::anchors_to_json(m.anchors)},
      {"input_channels", shape.input_channels},
      {"widths", shape.widths},
      {"num_classes", shape.num_classes},
      {"iteration", m.iteration},
      {"epoch", m.epoch},
      {"config_hash", m.config_hash},
      {"rng_state", m.rng_state},
      {"momentum", std::visit([](const auto& st) { return st.optimizer.config.momentum; }, ck.state)},
      {"weight_decay",
       std::visit([](const auto& st) { return st.optimizer.config.weight_decay; }, ck.state)},
  };
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  std::visit(
      [&](const auto& st) {
        using S = typename std::decay_t<decltype(st.model.embed.front().weight)>::Scalar;
        detail::put_u32(out, sizeof(S));
        const std::string text = meta.dump();
        detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
        out += text;
        std::uint32_t count = 0;
        st.model.for_each_tensor([&](const auto&) { ++count; });
        detail::put_u32(out, count);
        st.model.for_each_tensor([&](const auto& t) { detail::put_tensor<S>(out, t); });
        st.optimizer.velocity.for_each_tensor([&](const auto& t) { detail::put_tensor<S>(out, t); });
      },
      ck.state);
  return out;
}

namespace detail {

template <typename Scalar>
TrainingState<Scalar> read_state(Reader& r, const ModelShape& shape, std::uint32_t count,
                                 const SgdConfig& sgd) {
  Rng unused(0);
  TrainingState<Scalar> st{init_model<Scalar>(unused, shape), {}};
  std::uint32_t expected = 0;
  st.model.for_each_tensor([&](auto&) { ++expected; });
  if (expected != count) throw SchemaError("checkpoint: tensor count mismatch");
  st.model.for_each_tensor([&](auto& t) { get_tensor<Scalar>(r, t); });
  st.optimizer = OptimizerState<Scalar>::create(st.model, sgd);
  st.optimizer.velocity.for_each_tensor([&](auto& t) { get_tensor<Scalar>(r, t); });
  return st;
}

}  // namespace detail

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  detail::Reader r(bytes);
  char magic[8];
  r.read(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw SchemaError("checkpoint: bad magic");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw SchemaError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint32_t width = r.u32();
  if (width != 4 && width != 8) throw SchemaError("checkpoint: bad scalar width");
  const std::uint32_t meta_len = r.u32();
  std::string text(meta_len, '\0');
  r.read(text.data(), meta_len);

  Checkpoint ck;
  ModelShape shape;
  SgdConfig sgd;
  try {
    const json meta = json::parse(text);
    ck.meta.encoding.variant = parse_variant(meta.at("variant").get<std::string>());
    ck.meta.encoding.points_per_proposal = meta.at("points_per_proposal").get<int>();
    ck.meta.encoding.enlarge_wl = meta.at("enlarge_wl").get<double>();
    ck.meta.encoding.virtual_grid = meta.at("virtual_grid").get<int>();
    ck.meta.classes = meta.at("classes").get<std::vector<std::string>>();
    for (const auto& [cls, s] : meta.at("anchors").items()) {
      ck.meta.anchors.set(cls, {s.at(0).get<double>(), s.at(1).get<double>(),
                                s.at(2).get<double>()});
    }
    shape.input_channels = meta.at("input_channels").get<int>();
    shape.widths = meta.at("widths").get<std::vector<int>>();
    shape.num_classes = meta.at("num_classes").get<int>();
    ck.meta.iteration = meta.at("iteration").get<std::int64_t>();
    ck.meta.epoch = meta.at("epoch").get<int>();
    ck.meta.config_hash = meta.at("config_hash").get<std::uint64_t>();
    ck.meta.rng_state = meta.at("rng_state").get<std::string>();
    sgd.momentum = meta.at("momentum").get<double>();
    sgd.weight_decay = meta.at("weight_decay").get<double>();
  } catch (const json::exception& e) {
    throw SchemaError(std::string("checkpoint metadata: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw SchemaError(std::string("checkpoint metadata: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  if (width == 4) {
    ck.state = detail::read_state<float>(r, shape, count, sgd);
  } else {
    ck.state = detail::read_state<double>(r, shape, count, sgd);
  }
  if (!r.at_end()) throw SchemaError("checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  return deserialize_checkpoint(read_file(path));
}

inline std::string rng_state_string(const Rng& rng) {
  std::ostringstream ss;
  ss << rng;
  return ss.str();
}

inline Rng rng_from_state(const std::string& state) {
  Rng rng;
  std::istringstream ss(state);
  ss >> rng;
  if (!ss) throw SchemaError("checkpoint: unreadable RNG state");
  return rng;
}

}  // namespace lidar_rcnn
