// SPDX-License-Identifier: Apache-2.0

#include "rtda/trainer.hpp"

#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace rtda {

// ---------------------------------------------------------------------------
// Config

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename N>
N parse_number(std::string_view key, std::string_view text) {
  N value{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError("bad value '" + std::string(text) + "' for key '" + std::string(key) + "'");
  }
  return value;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("bad boolean '" + std::string(text) + "' for key '" + std::string(key) + "'");
}

}  // namespace

TrainConfig TrainConfig::parse(std::string_view text) {
  TrainConfig cfg;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view val = trim(line.substr(eq + 1));

    if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, val);
    else if (key == "max_iter") cfg.max_iter = parse_number<std::int64_t>(key, val);
    else if (key == "batch") cfg.batch = parse_number<int>(key, val);
    else if (key == "lambda_adv") cfg.lambda_adv = parse_number<double>(key, val);
    else if (key == "lr_seg") cfg.lr_seg = parse_number<double>(key, val);
    else if (key == "lr_disc") cfg.lr_disc = parse_number<double>(key, val);
    else if (key == "poly_power") cfg.poly_power = parse_number<double>(key, val);
    else if (key == "momentum") cfg.momentum = parse_number<double>(key, val);
    else if (key == "weight_decay") cfg.weight_decay = parse_number<double>(key, val);
    else if (key == "adam_beta1") cfg.adam_beta1 = parse_number<double>(key, val);
    else if (key == "adam_beta2") cfg.adam_beta2 = parse_number<double>(key, val);
    else if (key == "adam_eps") cfg.adam_eps = parse_number<double>(key, val);
    else if (key == "disc_variant") cfg.disc_variant = parse_variant(val);
    else if (key == "num_classes") cfg.num_classes = parse_number<int>(key, val);
    else if (key == "image_size") cfg.image_size = parse_number<int>(key, val);
    else if (key == "width") cfg.width = parse_number<double>(key, val);
    else if (key == "train_samples") cfg.train_samples = parse_number<std::size_t>(key, val);
    else if (key == "eval_samples") cfg.eval_samples = parse_number<std::size_t>(key, val);
    else if (key == "data_root") cfg.data_root = std::string(val);
    else if (key == "out_dir") cfg.out_dir = std::string(val);
    else if (key == "checkpoint_every") cfg.checkpoint_every = parse_number<std::int64_t>(key, val);
    else if (key == "disc_final_zero_init") cfg.disc_final_zero_init = parse_bool(key, val);
    else if (key == "loss_reduction") {
      if (val == "mean") cfg.loss_reduction = Reduction::Mean;
      else if (val == "sum") cfg.loss_reduction = Reduction::Sum;
      else throw ConfigError("loss_reduction must be 'mean' or 'sum'");
    } else {
      throw ConfigError("unknown config key '" + std::string(key) + "'");
    }
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string TrainConfig::to_text() const {
  std::string out;
  auto put = [&](std::string_view k, const std::string& v) { out += std::string(k) + " = " + v + "\n"; };
  put("seed", std::to_string(seed));
  put("max_iter", std::to_string(max_iter));
  put("batch", std::to_string(batch));
  put("lambda_adv", shortest(lambda_adv));
  put("lr_seg", shortest(lr_seg));
  put("lr_disc", shortest(lr_disc));
  put("poly_power", shortest(poly_power));
  put("momentum", shortest(momentum));
  put("weight_decay", shortest(weight_decay));
  put("adam_beta1", shortest(adam_beta1));
  put("adam_beta2", shortest(adam_beta2));
  put("adam_eps", shortest(adam_eps));
  put("disc_variant", std::string(variant_name(disc_variant)));
  put("num_classes", std::to_string(num_classes));
  put("image_size", std::to_string(image_size));
  put("width", shortest(width));
  put("train_samples", std::to_string(train_samples));
  put("eval_samples", std::to_string(eval_samples));
  if (!data_root.empty()) put("data_root", data_root);
  put("out_dir", out_dir);
  put("checkpoint_every", std::to_string(checkpoint_every));
  put("loss_reduction", loss_reduction == Reduction::Mean ? "mean" : "sum");
  put("disc_final_zero_init", disc_final_zero_init ? "true" : "false");
  return out;
}

void TrainConfig::validate() const {
  if (max_iter < 0) throw ConfigError("max_iter must be non-negative");
  if (max_iter > (1 << 24)) throw ConfigError("max_iter above 2^24 is not supported");
  if (batch < 1) throw ConfigError("batch must be at least 1");
  if (!(lambda_adv >= 0)) throw ConfigError("lambda_adv must be non-negative");
  if (!(lr_seg >= 0) || !(lr_disc >= 0)) throw ConfigError("learning rates must be non-negative");
  if (!(poly_power >= 0)) throw ConfigError("poly_power must be non-negative");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0,1)");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) {
    throw ConfigError("adam betas must be in [0,1)");
  }
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
  if (num_classes < 2 || num_classes > 254) throw ConfigError("num_classes must be in [2,254]");
  if (image_size < 32 || image_size % 32 != 0) throw ConfigError("image_size must be a positive multiple of 32");
  if (!(width > 0)) throw ConfigError("width must be positive");
  if (train_samples < 1 || eval_samples < 1) throw ConfigError("sample counts must be at least 1");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
}

std::string loss_log_header() { return "iter,l_seg,l_adv,l_d,lr_seg,lr_disc\n"; }

std::string loss_log_row(const LossRecord& r) {
  return std::to_string(r.iter) + "," + shortest(r.l_seg) + "," + shortest(r.l_adv) + "," + shortest(r.l_d) + "," +
         shortest(r.lr_seg) + "," + shortest(r.lr_disc) + "\n";
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

constexpr char kCkptMagic[4] = {'R', 'T', 'D', 'A'};

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("truncated checkpoint");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> Checkpoint::encode() const {
  std::vector<std::uint8_t> out(kCkptMagic, kCkptMagic + 4);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint64_t>(out, iteration);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t checksum = 0;
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF) throw FormatError("tensor name too long: " + t.name);
    if (t.tensor.rank() > 255) throw FormatError("tensor rank too large: " + t.name);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(static_cast<std::uint8_t>(t.tensor.rank()));
    for (int d : t.tensor.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float v : t.tensor.values()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_le<std::uint32_t>(out, bits);
      for (int i = 0; i < 4; ++i) checksum += (bits >> (8 * i)) & 0xFF;
    }
  }
  put_le<std::uint64_t>(out, checksum);
  return out;
}

Checkpoint Checkpoint::decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCkptMagic, 4) != 0) throw FormatError("bad magic");
  Reader r(bytes.subspan(4));
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.iteration = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  std::uint64_t checksum = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = r.get<std::uint16_t>();
    const auto name = r.take(len);
    t.name.assign(name.begin(), name.end());
    const int rank = r.get<std::uint8_t>();
    Shape shape;
    std::size_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      const auto extent = r.get<std::uint32_t>();
      if (extent > (1u << 30)) throw FormatError("implausible extent in tensor '" + t.name + "'");
      shape.push_back(static_cast<int>(extent));
      numel *= extent;
    }
    if (numel * 4 > r.remaining()) throw FormatError("truncated checkpoint");
    std::vector<float> values(numel);
    for (auto& v : values) {
      const auto bits = r.get<std::uint32_t>();
      for (int b = 0; b < 4; ++b) checksum += (bits >> (8 * b)) & 0xFF;
      std::memcpy(&v, &bits, 4);
    }
    t.tensor = Tensor<float>(std::move(shape), std::move(values));
    ckpt.tensors.push_back(std::move(t));
  }
  const auto stored = r.get<std::uint64_t>();
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint");
  if (stored != checksum) throw FormatError("checkpoint checksum mismatch");
  return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file(path, encode()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return decode(read_file(path)); }

const Tensor<float>* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t.tensor;
  }
  return nullptr;
}

const Tensor<float>& Checkpoint::get(std::string_view name) const {
  const auto* t = find(name);
  if (!t) throw FormatError("checkpoint has no tensor '" + std::string(name) + "'");
  return *t;
}

namespace {

// Integers are split into 16-bit pieces so every f32 holds them exactly.
Tensor<float> encode_u64(std::uint64_t v) {
  Tensor<float> t({4});
  for (int i = 0; i < 4; ++i) t[i] = static_cast<float>((v >> (16 * i)) & 0xFFFF);
  return t;
}

std::uint64_t decode_u64(const Tensor<float>& t) {
  if (t.numel() != 4) throw FormatError("malformed integer tensor");
  std::uint64_t v = 0;
  for (int i = 0; i < 4; ++i) {
    const float f = t[i];
    if (!(f >= 0 && f <= 65535 && f == std::floor(f))) throw FormatError("malformed integer tensor");
    v |= static_cast<std::uint64_t>(f) << (16 * i);
  }
  return v;
}

Tensor<float> scalar(double v) { return Tensor<float>({1}, static_cast<float>(v)); }

}  // namespace

CheckpointMeta read_meta(const Checkpoint& ckpt) {
  CheckpointMeta m;
  m.num_classes = static_cast<int>(decode_u64(ckpt.get("meta.num_classes")));
  m.width = ckpt.get("meta.width")[0];
  const auto variant = decode_u64(ckpt.get("meta.disc_variant"));
  if (variant > 2) throw FormatError("unknown discriminator variant in checkpoint");
  m.disc_variant = static_cast<DiscriminatorVariant>(variant);
  m.seed = decode_u64(ckpt.get("meta.seed"));
  m.max_iter = static_cast<std::int64_t>(decode_u64(ckpt.get("meta.max_iter")));
  return m;
}

void load_graph(ModelGraph& graph, const Checkpoint& ckpt, std::string_view prefix) {
  const std::string p(prefix);
  auto copy = [&](const NamedVar& nv) {
    const Tensor<float>& src = ckpt.get(p + nv.name);
    Var<float> v = nv.var;
    if (src.shape() != v.shape()) {
      throw ConfigError("checkpoint tensor '" + p + nv.name + "' has shape " + shape_str(src.shape()) + ", expected " +
                        shape_str(v.shape()));
    }
    v.mutable_value() = src;
  };
  for (const auto& nv : graph.registry().params()) copy(nv);
  for (const auto& nv : graph.registry().buffers()) copy(nv);
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

constexpr std::uint64_t kSegInitSalt = 0x5E6;
constexpr std::uint64_t kDiscInitSalt = 0xD15C;

ModelGraph make_seg(const TrainConfig& cfg) {
  cfg.validate();
  ModelGraph g = build_mini_bisenet(cfg.num_classes, cfg.width);
  Rng rng(mix_seed(cfg.seed, kSegInitSalt));
  g.init_kaiming(rng);
  return g;
}

ModelGraph make_disc(const TrainConfig& cfg) {
  ModelGraph g = build_discriminator(cfg.disc_variant, cfg.num_classes);
  Rng rng(mix_seed(cfg.seed, kDiscInitSalt));
  g.init_kaiming(rng);
  if (cfg.disc_final_zero_init) zero_final_layer(g);
  return g;
}

Var<float> input(const Tensor<float>& t) { return Var<float>(t, false); }

}  // namespace

Trainer::Trainer(TrainConfig config)
    : config_(std::move(config)),
      seg_(make_seg(config_)),
      disc_(make_disc(config_)),
      sgd_(seg_.registry().params(), SgdConfig{config_.momentum, config_.weight_decay}),
      adam_(disc_.registry().params(), AdamConfig{config_.adam_beta1, config_.adam_beta2, config_.adam_eps}) {}

double Trainer::lr_seg_now() const { return poly_lr(config_.lr_seg, iteration_, config_.max_iter, config_.poly_power); }
double Trainer::lr_disc_now() const {
  return poly_lr(config_.lr_disc, iteration_, config_.max_iter, config_.poly_power);
}

LossRecord Trainer::train_iteration(const DomainBatch& batch) {
  if (iteration_ >= config_.max_iter) throw ConfigError("training already reached max_iter");
  const std::string where = "iteration " + std::to_string(iteration_) + ": ";
  LossRecord rec;
  rec.iter = iteration_;
  rec.lr_seg = lr_seg_now();
  rec.lr_disc = lr_disc_now();
  const Reduction red = config_.loss_reduction;

  seg_.zero_grad();
  disc_.zero_grad();

  Tape<float> tape;
  Var<float> p_src, p_tgt;
  LossValue<float> l_seg, l_adv;
  try {
    Var<float> logits_s = seg_.forward(tape, input(batch.source_images), Mode::Train);
    l_seg = seg_cross_entropy_logits(tape, logits_s, batch.source_labels, red);
    p_src = detach(softmax_channels(tape, logits_s));
  } catch (const NumericError& e) {
    throw NumericError(where + "non-finite l_seg (" + e.what() + ")");
  }
  try {
    Var<float> logits_t = seg_.forward(tape, input(batch.target_images), Mode::Train);
    Var<float> probs_t = softmax_channels(tape, logits_t);
    p_tgt = detach(probs_t);
    disc_.set_requires_grad(false);
    Var<float> d_t = disc_.forward(tape, probs_t, Mode::Train);
    l_adv = adv_loss(tape, d_t, red);
    disc_.set_requires_grad(true);
  } catch (const NumericError& e) {
    disc_.set_requires_grad(true);
    throw NumericError(where + "non-finite l_adv (" + e.what() + ")");
  }
  try {
    auto total = total_seg_objective(tape, l_seg, l_adv, static_cast<float>(config_.lambda_adv));
    tape.backward(total.var);
  } catch (const NumericError& e) {
    throw NumericError(where + "non-finite l_seg + lambda * l_adv (" + e.what() + ")");
  }
  sgd_.step(rec.lr_seg);
  rec.l_seg = l_seg.value();
  rec.l_adv = l_adv.value();

  rec = disc_step(p_src, p_tgt, rec);
  ++iteration_;
  return rec;
}

LossRecord Trainer::disc_step(const Var<float>& p_src, const Var<float>& p_tgt, LossRecord rec) {
  Tape<float> tape;
  try {
    Var<float> d_s = disc_.forward(tape, p_src, Mode::Train);
    Var<float> d_t = disc_.forward(tape, p_tgt, Mode::Train);
    auto l_d = disc_loss(tape, d_s, d_t, config_.loss_reduction);
    tape.backward(l_d.var);
    rec.l_d = l_d.value();
  } catch (const NumericError& e) {
    throw NumericError("iteration " + std::to_string(iteration_) + ": non-finite l_d (" + e.what() + ")");
  }
  adam_.step(rec.lr_disc);
  return rec;
}

LossRecord Trainer::supervised_iteration(const DomainBatch& batch) {
  if (iteration_ >= config_.max_iter) throw ConfigError("training already reached max_iter");
  LossRecord rec;
  rec.iter = iteration_;
  rec.lr_seg = lr_seg_now();
  rec.lr_disc = lr_disc_now();
  seg_.zero_grad();
  Tape<float> tape;
  try {
    Var<float> logits = seg_.forward(tape, input(batch.source_images), Mode::Train);
    auto l_seg = seg_cross_entropy_logits(tape, logits, batch.source_labels, config_.loss_reduction);
    tape.backward(l_seg.var);
    rec.l_seg = l_seg.value();
  } catch (const NumericError& e) {
    throw NumericError("iteration " + std::to_string(iteration_) + ": non-finite l_seg (" + e.what() + ")");
  }
  sgd_.step(rec.lr_seg);
  ++iteration_;
  return rec;
}

DomainBatch Trainer::batch_for_iteration(const DomainSplit& split) const {
  const std::size_t n = split.size();
  const std::size_t b = static_cast<std::size_t>(config_.batch);
  const std::size_t per_epoch = (n + b - 1) / b;
  const auto iter = static_cast<std::uint64_t>(iteration_);
  const std::uint64_t epoch = iter / per_epoch;
  const std::size_t begin = (iter % per_epoch) * b;
  const std::size_t end = std::min(begin + b, n);
  const auto src = epoch_permutation(n, config_.seed, epoch, 0);
  const auto tgt = epoch_permutation(n, config_.seed, epoch, 1);
  return make_batch(split, std::span(src).subspan(begin, end - begin), std::span(tgt).subspan(begin, end - begin));
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ckpt;
  ckpt.iteration = static_cast<std::uint64_t>(iteration_);
  auto add = [&](std::string name, const Tensor<float>& t) { ckpt.tensors.push_back({std::move(name), t}); };
  add("meta.num_classes", encode_u64(static_cast<std::uint64_t>(config_.num_classes)));
  add("meta.width", scalar(config_.width));
  add("meta.disc_variant", encode_u64(static_cast<std::uint64_t>(config_.disc_variant)));
  add("meta.seed", encode_u64(config_.seed));
  add("meta.max_iter", encode_u64(static_cast<std::uint64_t>(config_.max_iter)));
  add("meta.lambda_adv", scalar(config_.lambda_adv));
  add("meta.lr_seg", scalar(config_.lr_seg));
  add("meta.lr_disc", scalar(config_.lr_disc));
  add("meta.poly_power", scalar(config_.poly_power));
  add("meta.sgd_steps", encode_u64(sgd_.steps()));
  add("meta.adam_steps", encode_u64(adam_.steps()));
  for (const auto& nv : seg_.registry().params()) add("seg." + nv.name, nv.var.value());
  for (const auto& nv : seg_.registry().buffers()) add("seg." + nv.name, nv.var.value());
  for (const auto& nv : disc_.registry().params()) add("disc." + nv.name, nv.var.value());
  const auto seg_params = seg_.registry().params();
  for (std::size_t i = 0; i < seg_params.size(); ++i) {
    add("sgd." + seg_params[i].name + ".momentum", sgd_.momentum_buffers()[i]);
  }
  const auto disc_params = disc_.registry().params();
  for (std::size_t i = 0; i < disc_params.size(); ++i) {
    add("adam." + disc_params[i].name + ".m", adam_.first_moments()[i]);
    add("adam." + disc_params[i].name + ".v", adam_.second_moments()[i]);
  }
  return ckpt;
}

void Trainer::restore(const Checkpoint& ckpt) {
  const CheckpointMeta meta = read_meta(ckpt);
  if (meta.num_classes != config_.num_classes) throw ConfigError("checkpoint class count differs from config");
  if (static_cast<float>(meta.width) != static_cast<float>(config_.width)) {
    throw ConfigError("checkpoint width differs from config");
  }
  if (meta.disc_variant != config_.disc_variant) throw ConfigError("checkpoint discriminator differs from config");
  if (ckpt.iteration > static_cast<std::uint64_t>(config_.max_iter)) {
    throw ConfigError("checkpoint iteration exceeds max_iter");
  }
  load_graph(seg_, ckpt, "seg.");
  load_graph(disc_, ckpt, "disc.");
  auto copy = [&](Tensor<float>& dst, const std::string& name) {
    const auto& src = ckpt.get(name);
    if (src.shape() != dst.shape()) throw ConfigError("checkpoint tensor '" + name + "' has the wrong shape");
    dst = src;
  };
  const auto seg_params = seg_.registry().params();
  for (std::size_t i = 0; i < seg_params.size(); ++i) {
    copy(sgd_.momentum_buffers()[i], "sgd." + seg_params[i].name + ".momentum");
  }
  const auto disc_params = disc_.registry().params();
  for (std::size_t i = 0; i < disc_params.size(); ++i) {
    copy(adam_.first_moments()[i], "adam." + disc_params[i].name + ".m");
    copy(adam_.second_moments()[i], "adam." + disc_params[i].name + ".v");
  }
  sgd_.set_steps(decode_u64(ckpt.get("meta.sgd_steps")));
  adam_.set_steps(decode_u64(ckpt.get("meta.adam_steps")));
  iteration_ = static_cast<std::int64_t>(ckpt.iteration);
}

// ---------------------------------------------------------------------------
// Loops

namespace {

std::string ckpt_name(std::int64_t iter) {
  std::string digits = std::to_string(iter);
  if (digits.size() < 6) digits.insert(0, 6 - digits.size(), '0');
  return "ckpt_" + digits + ".rtda";
}

// Header plus the first `rows` data rows of an existing log.
std::string log_prefix(const std::filesystem::path& path, std::uint64_t rows) {
  std::ifstream in(path);
  if (!in) throw Error("cannot resume: missing log " + path.string());
  std::string out, line;
  if (!std::getline(in, line) || line + "\n" != loss_log_header()) throw Error("cannot resume: malformed log header");
  out = loss_log_header();
  for (std::uint64_t i = 0; i < rows; ++i) {
    if (!std::getline(in, line)) throw Error("cannot resume: log has fewer rows than the checkpoint iteration");
    out += line + "\n";
  }
  return out;
}

}  // namespace

TrainResult run_training(const TrainConfig& config, const DomainSplit& train, const std::optional<Checkpoint>& resume) {
  if (train.num_classes() != config.num_classes) throw ConfigError("dataset class count differs from config");
  if (train.height() != config.image_size || train.width() != config.image_size) {
    throw ConfigError("dataset image size differs from config");
  }
  Trainer trainer(config);
  if (resume) trainer.restore(*resume);

  const bool write = !config.out_dir.empty();
  const std::filesystem::path dir(config.out_dir);
  std::ofstream log;
  if (write) {
    std::filesystem::create_directories(dir);
    const std::string head =
        resume ? log_prefix(dir / "log.csv", resume->iteration) : loss_log_header();
    log.open(dir / "log.csv", std::ios::trunc);
    if (!log) throw Error("cannot write " + (dir / "log.csv").string());
    log << head << std::flush;
  }

  TrainResult result;
  while (trainer.iteration() < config.max_iter) {
    const LossRecord rec = trainer.train_iteration(trainer.batch_for_iteration(train));
    result.log.push_back(rec);
    if (write) {
      log << loss_log_row(rec) << std::flush;
      if (config.checkpoint_every > 0 && trainer.iteration() % config.checkpoint_every == 0) {
        trainer.checkpoint().save(dir / ckpt_name(trainer.iteration()));
      }
    }
  }
  result.final_checkpoint = trainer.checkpoint();
  if (write) {
    if (!log) throw Error("failed writing " + (dir / "log.csv").string());
    result.final_checkpoint.save(dir / "final.rtda");
  }
  return result;
}

IouReport evaluate(ModelGraph& seg, const DomainSplit& split, Domain domain,
                   std::optional<std::span<const int>> class_subset, int batch) {
  if (batch < 1) throw ConfigError("evaluation batch must be at least 1");
  const bool was_trainable = !seg.registry().params().empty() && seg.registry().params().front().var.requires_grad();
  seg.set_requires_grad(false);
  ConfusionMatrix cm(split.num_classes());
  const int h = split.height(), w = split.width();
  const std::size_t img = 3 * static_cast<std::size_t>(h) * w;
  const std::size_t lbl = static_cast<std::size_t>(h) * w;
  try {
    for (std::size_t start = 0; start < split.size(); start += batch) {
      const int b = static_cast<int>(std::min<std::size_t>(batch, split.size() - start));
      Tensor<float> x({b, 3, h, w});
      LabelMask truth({b, h, w});
      for (int i = 0; i < b; ++i) {
        const auto& im = split.evaluation_image(domain, start + i);
        const auto& lb = split.evaluation_labels(domain, start + i);
        std::copy(im.data(), im.data() + img, x.data() + i * img);
        std::copy(lb.data(), lb.data() + lbl, truth.data() + i * lbl);
      }
      Tape<float> tape;
      Var<float> logits = seg.forward(tape, input(x), Mode::Eval);
      if (logits.shape()[1] != split.num_classes()) {
        throw ConfigError("network predicts " + std::to_string(logits.shape()[1]) + " classes, dataset has " +
                          std::to_string(split.num_classes()));
      }
      Var<float> probs = softmax_channels(tape, logits);
      cm.accumulate(argmax_channels(probs.value()), truth);
    }
  } catch (...) {
    seg.set_requires_grad(was_trainable);
    throw;
  }
  seg.set_requires_grad(was_trainable);
  return miou(cm, class_subset);
}

ModelGraph segmentation_from_checkpoint(const Checkpoint& ckpt) {
  const CheckpointMeta meta = read_meta(ckpt);
  ModelGraph seg = build_mini_bisenet(meta.num_classes, meta.width);
  load_graph(seg, ckpt, "seg.");
  return seg;
}

IouReport evaluate(const Checkpoint& ckpt, const DomainSplit& split, Domain domain,
                   std::optional<std::span<const int>> class_subset) {
  const CheckpointMeta meta = read_meta(ckpt);
  if (meta.num_classes != split.num_classes()) {
    throw ConfigError("checkpoint has " + std::to_string(meta.num_classes) + " classes, dataset has " +
                      std::to_string(split.num_classes()));
  }
  ModelGraph seg = segmentation_from_checkpoint(ckpt);
  return evaluate(seg, split, domain, class_subset);
}

DomainSplit training_split(const TrainConfig& config) {
  if (!config.data_root.empty()) return DomainSplit::load(config.data_root, "train", config.num_classes);
  return DomainSplit::generate(ShiftConfig::defaults(config.num_classes), "train", config.train_samples,
                               config.image_size, config.num_classes);
}

DomainSplit evaluation_split(const TrainConfig& config) {
  if (!config.data_root.empty()) return DomainSplit::load(config.data_root, "val", config.num_classes);
  return DomainSplit::generate(ShiftConfig::defaults(config.num_classes), "val", config.eval_samples,
                               config.image_size, config.num_classes);
}

std::vector<VariantResult> compare_variants(const TrainConfig& config) {
  const DomainSplit train = training_split(config);
  const DomainSplit val = evaluation_split(config);
  std::vector<VariantResult> rows;
  for (auto variant : all_variants()) {
    TrainConfig cfg = config;
    cfg.disc_variant = variant;
    cfg.out_dir.clear();
    TrainResult run = run_training(cfg, train);
    ModelGraph seg = segmentation_from_checkpoint(run.final_checkpoint);
    VariantResult row;
    row.variant = variant;
    ModelGraph disc = build_discriminator(variant, cfg.num_classes);
    row.disc_params = disc.num_params();
    row.disc_flops = count_flops(disc, cfg.image_size, cfg.image_size).total_flops();
    row.source_miou = evaluate(seg, val, Domain::Source).mean;
    row.target_miou = evaluate(seg, val, Domain::Target).mean;
    rows.push_back(row);
  }
  return rows;
}

std::string comparison_table(std::span<const VariantResult> rows) {
  std::ostringstream out;
  out << "variant,disc_params,disc_flops,source_miou,target_miou\n";
  for (const auto& r : rows) {
    out << variant_name(r.variant) << ',' << r.disc_params << ',' << r.disc_flops << ',' << shortest(r.source_miou)
        << ',' << shortest(r.target_miou) << '\n';
  }
  return out.str();
}

}  // namespace rtda
