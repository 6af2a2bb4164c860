#include "ctxreg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ctxreg/keyvalue.hpp"

namespace ctxreg {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'T', 'X', 'R', 'E', 'G', 'C', 'K'};

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <typename T>
  void pod(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void values(const Tensor& t) {
    out_.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(Real)));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}
  template <typename T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    check();
    return v;
  }
  std::string bytes() {
    const auto n = pod<std::uint64_t>();
    if (n > (1u << 30)) fail("implausible block length");
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    check();
    return s;
  }
  void values(Tensor& t) {
    in_.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(Real)));
    check();
  }
  [[noreturn]] void fail(const std::string& what) const { throw CheckpointError(path_ + ": " + what); }

 private:
  void check() const {
    if (!in_) fail("truncated checkpoint");
  }
  std::istream& in_;
  std::string path_;
};

std::string trainer_text(const TrainerState& s) {
  std::ostringstream os;
  os << "step = " << s.step << '\n'
     << "epoch = " << s.epoch << '\n'
     << "lr = " << format_exact(s.lr) << '\n'
     << "best = " << format_exact(s.plateau.best) << '\n'
     << "has_best = " << (s.plateau.has_best ? "true" : "false") << '\n'
     << "stagnant = " << s.plateau.stagnant << '\n'
     << "halvings = " << s.plateau.halvings << '\n';
  return os.str();
}

TrainerState parse_trainer(const std::string& text) {
  std::istringstream in(text);
  KeyValueReader kv(in, "checkpoint trainer block");
  TrainerState s;
  s.step = kv.get_uint("step");
  s.epoch = kv.get_uint("epoch");
  s.lr = kv.get_double("lr");
  s.plateau.best = kv.get_double("best");
  s.plateau.has_best = kv.get_bool("has_best");
  s.plateau.stagnant = kv.get_uint("stagnant");
  s.plateau.halvings = kv.get_uint("halvings");
  kv.finish();
  return s;
}

}  // namespace

Checkpoint capture_checkpoint(const ContextTransformer& model, const AdamState* optimizer, const TrainerState& trainer) {
  Checkpoint c;
  c.config = model.config();
  for (const auto& [name, t] : model.params()) c.params.emplace_back(name, t.clone());
  if (optimizer) {
    AdamState copy;
    copy.step = optimizer->step;
    for (const auto& t : optimizer->first) copy.first.push_back(t.clone());
    for (const auto& t : optimizer->second) copy.second.push_back(t.clone());
    c.optimizer = std::move(copy);
  }
  c.trainer = trainer;
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    Writer w(out);
    out.write(kMagic, sizeof(kMagic));
    w.pod<std::uint32_t>(Checkpoint::kVersion);
    w.pod<std::uint32_t>(sizeof(Real));
    std::ostringstream cfg;
    ckpt.config.write(cfg);
    w.bytes(cfg.str());
    w.pod<std::uint64_t>(ckpt.params.size());
    for (const auto& [name, t] : ckpt.params) {
      w.pod<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape()) w.pod<std::uint64_t>(d);
      w.values(t);
    }
    w.pod<std::uint8_t>(ckpt.optimizer ? 1 : 0);
    if (ckpt.optimizer) {
      w.pod<std::uint64_t>(ckpt.optimizer->step);
      for (const auto& t : ckpt.optimizer->first) w.values(t);
      for (const auto& t : ckpt.optimizer->second) w.values(t);
    }
    w.bytes(trainer_text(ckpt.trainer));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) r.fail("not a checkpoint file");
  const auto version = r.pod<std::uint32_t>();
  if (version != Checkpoint::kVersion) {
    r.fail("checkpoint version " + std::to_string(version) + " is incompatible with this build (expects " +
           std::to_string(Checkpoint::kVersion) + ")");
  }
  const auto real_bytes = r.pod<std::uint32_t>();
  if (real_bytes != sizeof(Real)) {
    r.fail("checkpoint stores " + std::to_string(real_bytes * 8) + "-bit values but this build uses " +
           std::to_string(sizeof(Real) * 8) + "-bit");
  }
  Checkpoint c;
  {
    std::istringstream cfg(r.bytes());
    KeyValueReader kv(cfg, path.string() + " config block");
    c.config = ModelConfig::read(kv);
    kv.finish();
  }
  const auto count = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.pod<std::uint32_t>();
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) r.fail("implausible tensor rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = r.pod<std::uint64_t>();
    Tensor t = Tensor::zeros(shape);
    r.values(t);
    c.params.emplace_back(std::move(name), std::move(t));
  }
  if (r.pod<std::uint8_t>()) {
    AdamState s;
    s.step = r.pod<std::uint64_t>();
    for (const auto& [name, p] : c.params) {
      s.first.push_back(Tensor::zeros(p.shape()));
      r.values(s.first.back());
    }
    for (const auto& [name, p] : c.params) {
      s.second.push_back(Tensor::zeros(p.shape()));
      r.values(s.second.back());
    }
    c.optimizer = std::move(s);
  }
  c.trainer = parse_trainer(r.bytes());
  return c;
}

void load_weights(ContextTransformer& model, const Checkpoint& ckpt) {
  if (model.params().size() != ckpt.params.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(ckpt.params.size()) + " tensors, model expects " +
                          std::to_string(model.params().size()));
  }
  std::size_t i = 0;
  for (auto& [name, t] : model.params()) {
    const auto& [cname, ct] = ckpt.params[i++];
    if (cname != name || ct.shape() != t.shape()) {
      throw CheckpointError("checkpoint tensor '" + cname + "' " + shape_str(ct.shape()) + " does not match '" + name +
                            "' " + shape_str(t.shape()));
    }
    std::copy(ct.data().begin(), ct.data().end(), t.data().begin());
  }
}

std::unique_ptr<ContextTransformer> restore_model(const Checkpoint& ckpt) {
  auto model = std::make_unique<ContextTransformer>(ckpt.config, 0);
  load_weights(*model, ckpt);
  return model;
}

}  // namespace ctxreg
