#include "glfusion/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace glf {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'G', 'L', 'F', 'C', 'K', 'P', 'T', '\0'};

std::uint64_t fnv1a(const std::string& bytes, size_t count) {
  std::uint64_t h = 1469598103934665603ULL;
  for (size_t i = 0; i < count; ++i) {
    h ^= static_cast<unsigned char>(bytes[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

class Writer {
 public:
  template <typename T>
  void put(const T& v) {
    const char* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint64_t>(s.size()));
    buf_.append(s);
  }
  void put_matrix(const Matrix& m) {
    put(static_cast<std::uint32_t>(m.rows()));
    put(static_cast<std::uint32_t>(m.cols()));
    buf_.append(reinterpret_cast<const char*>(m.data()), static_cast<size_t>(m.size()) * sizeof(double));
  }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& bytes, size_t end) : buf_(bytes), end_(end) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + at_, sizeof(T));
    at_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s = buf_.substr(at_, n);
    at_ += n;
    return s;
  }
  Matrix get_matrix() {
    const auto rows = get<std::uint32_t>();
    const auto cols = get<std::uint32_t>();
    const size_t bytes = static_cast<size_t>(rows) * cols * sizeof(double);
    need(bytes);
    Matrix m(rows, cols);
    std::memcpy(m.data(), buf_.data() + at_, bytes);
    at_ += bytes;
    return m;
  }
  bool done() const { return at_ == end_; }

 private:
  void need(size_t n) const {
    if (at_ + n > end_) throw CheckpointError("checkpoint truncated");
  }
  const std::string& buf_;
  size_t end_;
  size_t at_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const GlFusionModel& model, const OptimizerState* optimizer,
                     const nlohmann::json& metadata) {
  Writer w;
  w.bytes().append(kMagic, sizeof(kMagic));
  w.put(kCheckpointVersion);
  w.put_string(model.config().to_json().dump());
  const auto params = model.parameters().all();
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) {
    w.put(static_cast<std::uint32_t>(p->name.size()));
    w.bytes().append(p->name);
    w.put_matrix(p->value);
  }
  w.put(static_cast<std::uint8_t>(optimizer ? 1 : 0));
  if (optimizer) {
    if (optimizer->first_moment.size() != params.size()) throw CheckpointError("optimizer state does not match model");
    const AdamWSettings& s = optimizer->settings;
    for (double v : {s.learning_rate, s.weight_decay, s.beta1, s.beta2, s.epsilon}) w.put(v);
    w.put(static_cast<std::int64_t>(optimizer->step));
    for (size_t i = 0; i < params.size(); ++i) {
      w.put_matrix(optimizer->first_moment[i]);
      w.put_matrix(optimizer->second_moment[i]);
    }
  }
  w.put_string(metadata.dump());
  w.put(fnv1a(w.bytes(), w.bytes().size()));

  const std::filesystem::path target(path);
  const std::filesystem::path temp = target.string() + ".tmp";
  {
    std::ofstream out(temp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + temp.string());
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw CheckpointError("write failed for " + temp.string());
  }
  std::filesystem::rename(temp, target);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t) ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(path + ": not a checkpoint file");
  }
  const size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, sizeof(stored));
  if (stored != fnv1a(bytes, body)) throw CheckpointError(path + ": checksum mismatch (corrupt file)");

  Reader r(bytes, body);
  for (size_t i = 0; i < sizeof(kMagic); ++i) r.get<char>();
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(path + ": version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  try {
    ck.config = ModelConfig::from_json(nlohmann::json::parse(r.get_string()));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path + ": malformed config block: " + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    std::string name;
    for (std::uint32_t k = 0; k < len; ++k) name.push_back(r.get<char>());
    ck.parameters.emplace_back(std::move(name), r.get_matrix());
  }
  if (r.get<std::uint8_t>()) {
    OptimizerState s;
    s.settings.learning_rate = r.get<double>();
    s.settings.weight_decay = r.get<double>();
    s.settings.beta1 = r.get<double>();
    s.settings.beta2 = r.get<double>();
    s.settings.epsilon = r.get<double>();
    s.step = r.get<std::int64_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
      s.first_moment.push_back(r.get_matrix());
      s.second_moment.push_back(r.get_matrix());
    }
    ck.optimizer = std::move(s);
  }
  ck.metadata = nlohmann::json::parse(r.get_string());
  if (!r.done()) throw CheckpointError(path + ": trailing bytes before checksum");
  return ck;
}

void restore_parameters(GlFusionModel& model, const Checkpoint& checkpoint) {
  if (!(checkpoint.config == model.config())) {
    const auto& a = checkpoint.config;
    const auto& b = model.config();
    std::string why = "checkpoint config differs from model config";
    if (a.d_model != b.d_model) why += " (d_model " + std::to_string(a.d_model) + " vs " + std::to_string(b.d_model) + ")";
    throw ConfigError(why);
  }
  auto params = model.parameters().all();
  if (params.size() != checkpoint.parameters.size()) throw ConfigError("checkpoint parameter count differs");
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [name, value] = checkpoint.parameters[i];
    if (params[i]->name != name || params[i]->value.rows() != value.rows() || params[i]->value.cols() != value.cols()) {
      throw ConfigError("checkpoint parameter " + name + " does not match " + params[i]->name);
    }
    params[i]->value = value;
    params[i]->zero_grad();
  }
}

std::unique_ptr<GlFusionModel> model_from_checkpoint(const Checkpoint& checkpoint) {
  auto model = std::make_unique<GlFusionModel>(checkpoint.config);
  restore_parameters(*model, checkpoint);
  return model;
}

}  // namespace glf
