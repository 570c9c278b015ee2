#include "ldgm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "ldgm/error.hpp"

namespace ldgm {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'L', 'D', 'G', 'M', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void append_tensor(std::string& payload, const nn::Tensor& t) {
  for (double v : t.values()) {
    const float f = static_cast<float>(v);
    char buf[4];
    std::memcpy(buf, &f, 4);
    payload.append(buf, 4);
  }
}

nn::Tensor read_tensor(std::string_view payload, std::size_t offset, std::size_t rows, std::size_t cols) {
  const std::size_t bytes = rows * cols * 4;
  if (offset + bytes > payload.size()) throw Error(ErrorCode::Checkpoint, "checkpoint truncated: tensor past end");
  nn::Tensor t(rows, cols);
  for (std::size_t i = 0; i < rows * cols; ++i) {
    float f;
    std::memcpy(&f, payload.data() + offset + 4 * i, 4);
    t[i] = f;
  }
  return t;
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

json adam_to_json(const nn::AdamWConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"beta1", c.beta1},
          {"beta2", c.beta2},                 {"eps", c.eps},
          {"weight_decay", c.weight_decay},   {"warmup_steps", c.warmup_steps},
          {"clip_norm", c.clip_norm}};
}

nn::AdamWConfig adam_from_json(const json& j) {
  nn::AdamWConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.eps = j.at("eps").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.warmup_steps = j.at("warmup_steps").get<long>();
  c.clip_norm = j.at("clip_norm").get<double>();
  return c;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t hash) {
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

void save_checkpoint(const std::filesystem::path& path, const Denoiser& model, const QuantizerConfig& quantizer,
                     const CategoryVocabulary& vocabulary, const nn::AdamW* optimizer, const json& extra) {
  std::string payload;
  json tensors = json::array();
  auto add = [&](const std::string& name, const nn::Tensor& t) {
    tensors.push_back({{"name", name}, {"shape", {t.rows(), t.cols()}}, {"offset", payload.size()}});
    append_tensor(payload, t);
  };
  for (const auto& p : model.parameters()) add(p.name, p.value);
  json opt = nullptr;
  if (optimizer) {
    std::size_t i = 0;
    for (const auto& p : model.parameters()) add("opt.m." + p.name, optimizer->first_moments()[i++]);
    i = 0;
    for (const auto& p : model.parameters()) add("opt.v." + p.name, optimizer->second_moments()[i++]);
    opt = {{"steps", optimizer->steps_taken()}, {"config", adam_to_json(optimizer->config())}};
  }
  const json manifest = {
      {"format_version", kCheckpointFormatVersion},
      {"model", to_json(model.config())},
      {"quantizer", quantizer_to_json(quantizer)},
      {"vocabulary", vocabulary_to_json(vocabulary)},
      {"tensors", std::move(tensors)},
      {"optimizer", std::move(opt)},
      {"extra", extra},
      {"payload_bytes", payload.size()},
      {"payload_fnv1a64", hex(fnv1a64(payload))},
  };
  const std::string text = manifest.dump();

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Checkpoint, "cannot write checkpoint " + path.string());
    out.write(kMagic, 8);
    const std::uint64_t len = text.size();
    char buf[8];
    std::memcpy(buf, &len, 8);
    out.write(buf, 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw Error(ErrorCode::Checkpoint, "short write on " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Checkpoint, "cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw Error(ErrorCode::Checkpoint, "not a checkpoint file: " + path.string());
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 8);
  if (16 + len > bytes.size()) throw Error(ErrorCode::Checkpoint, "checkpoint truncated: manifest past end");
  const std::string_view text(bytes.data() + 16, len);
  const std::string_view payload(bytes.data() + 16 + len, bytes.size() - 16 - len);

  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Checkpoint, std::string("corrupt manifest: ") + e.what());
  }
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointFormatVersion)
    throw Error(ErrorCode::Checkpoint, "incompatible checkpoint format version " + std::to_string(version) +
                                           " (expected " + std::to_string(kCheckpointFormatVersion) + ")");
  if (manifest.at("payload_bytes").get<std::size_t>() != payload.size())
    throw Error(ErrorCode::Checkpoint, "checkpoint truncated: payload size mismatch");
  if (manifest.at("payload_fnv1a64").get<std::string>() != hex(fnv1a64(payload)))
    throw Error(ErrorCode::Checkpoint, "checkpoint integrity check failed");

  Checkpoint ck;
  ck.quantizer = quantizer_from_json(manifest.at("quantizer"));
  ck.vocabulary = vocabulary_from_json(manifest.at("vocabulary"));
  ck.extra = manifest.value("extra", json::object());
  ck.model_version = hex(fnv1a64(text));
  ck.model = std::make_unique<Denoiser>(model_config_from_json(manifest.at("model")), 0);

  std::map<std::string, nn::Tensor> stored;
  for (const auto& t : manifest.at("tensors")) {
    const auto shape = t.at("shape").get<std::array<std::size_t, 2>>();
    stored.emplace(t.at("name").get<std::string>(),
                   read_tensor(payload, t.at("offset").get<std::size_t>(), shape[0], shape[1]));
  }
  auto take = [&](const std::string& name, const nn::Tensor& like) {
    auto it = stored.find(name);
    if (it == stored.end()) throw Error(ErrorCode::Checkpoint, "checkpoint lacks tensor " + name);
    if (!it->second.same_shape(like)) throw Error(ErrorCode::Checkpoint, "shape mismatch for tensor " + name);
    return it->second;
  };
  for (auto& p : ck.model->parameters()) p.value = take(p.name, p.value);

  if (!manifest.at("optimizer").is_null()) {
    OptimizerState st;
    st.config = adam_from_json(manifest.at("optimizer").at("config"));
    st.steps = manifest.at("optimizer").at("steps").get<long>();
    for (const auto& p : ck.model->parameters()) st.first_moments.push_back(take("opt.m." + p.name, p.value));
    for (const auto& p : ck.model->parameters()) st.second_moments.push_back(take("opt.v." + p.name, p.value));
    ck.optimizer = std::move(st);
  }
  return ck;
}

void restore_optimizer(nn::AdamW& optimizer, const OptimizerState& state) {
  if (state.first_moments.size() != optimizer.first_moments().size())
    throw Error(ErrorCode::Checkpoint, "optimizer state does not match the model");
  for (std::size_t i = 0; i < state.first_moments.size(); ++i) {
    if (!state.first_moments[i].same_shape(optimizer.first_moments()[i]))
      throw Error(ErrorCode::Checkpoint, "optimizer moment shape mismatch");
    optimizer.first_moments()[i] = state.first_moments[i];
    optimizer.second_moments()[i] = state.second_moments[i];
  }
  optimizer.set_steps_taken(state.steps);
}

}  // namespace ldgm
