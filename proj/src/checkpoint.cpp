#include "gasr/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace gasr {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

namespace {

void check_token(const std::string& text, const char* what) {
  require(!text.empty(), std::string("checkpoint: empty ") + what);
  for (char c : text) {
    require(c != ' ' && c != '\t' && c != '\n' && c != '\r', std::string("checkpoint: whitespace in ") + what + " '" + text + "'");
  }
}

std::string shape_token(const Shape& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(shape[i]);
  }
  return out.empty() ? "scalar" : out;
}

bool parse_shape(const std::string& text, Shape& shape) {
  shape.clear();
  if (text == "scalar") return true;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find('x', start), text.size());
    Index dim = 0;
    const auto r = std::from_chars(text.data() + start, text.data() + end, dim);
    if (r.ec != std::errc() || r.ptr != text.data() + end || dim < 0) return false;
    shape.push_back(dim);
    start = end + 1;
  }
  return true;
}

template <typename T>
bool parse_int(const std::string& text, T& value) {
  const auto r = std::from_chars(text.data(), text.data() + text.size(), value);
  return r.ec == std::errc() && r.ptr == text.data() + text.size();
}

}  // namespace

void Checkpoint::set_meta(const std::string& key, const std::string& value) {
  check_token(key, "metadata key");
  check_token(value, "metadata value");
  for (auto& [k, v] : metadata_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  metadata_.emplace_back(key, value);
}

std::optional<std::string> Checkpoint::meta(const std::string& key) const {
  for (const auto& [k, v] : metadata_) {
    if (k == key) return v;
  }
  return std::nullopt;
}

std::string Checkpoint::require_meta(const std::string& key) const {
  auto v = meta(key);
  if (!v) throw ContractError("checkpoint: missing metadata '" + key + "'");
  return *v;
}

void Checkpoint::add_tensor(CheckpointTensor tensor) {
  check_token(tensor.name, "tensor name");
  require(find(tensor.name) == nullptr, "checkpoint: duplicate tensor '" + tensor.name + "'");
  require(static_cast<Index>(tensor.values.size()) == shape_size(tensor.shape),
          "checkpoint: tensor '" + tensor.name + "' value count does not match its shape");
  tensors_.push_back(std::move(tensor));
}

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

const CheckpointTensor& Checkpoint::tensor(const std::string& name) const {
  const auto* t = find(name);
  if (!t) throw ContractError("checkpoint: missing tensor '" + name + "'");
  return *t;
}

std::string manifest_path(const std::string& stem) { return stem + ".manifest"; }
std::string blob_path(const std::string& stem) { return stem + ".bin"; }

bool checkpoint_exists(const std::string& stem) {
  return std::filesystem::exists(manifest_path(stem)) && std::filesystem::exists(blob_path(stem));
}

void save_checkpoint(const std::string& stem, const Checkpoint& checkpoint) {
  // Write both files under temporary names, then rename, so a crash never
  // leaves a manifest pointing at a half-written blob.
  const std::string manifest_tmp = manifest_path(stem) + ".tmp";
  const std::string blob_tmp = blob_path(stem) + ".tmp";
  {
    std::ofstream blob(blob_tmp, std::ios::binary);
    std::ofstream manifest(manifest_tmp, std::ios::binary);
    if (!blob || !manifest) throw std::runtime_error("cannot write checkpoint: " + stem);
    manifest << "gasr-checkpoint " << Checkpoint::kFormatVersion << '\n';
    for (const auto& [k, v] : checkpoint.metadata()) manifest << "meta " << k << ' ' << v << '\n';
    std::size_t offset = 0;
    for (const auto& t : checkpoint.tensors()) {
      manifest << "tensor " << t.name << ' ' << offset << ' ' << t.values.size() << ' ' << shape_token(t.shape) << '\n';
      const auto bytes = t.values.size() * sizeof(float);
      blob.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(bytes));
      offset += bytes;
    }
    blob.flush();
    manifest.flush();
    if (!blob || !manifest) throw std::runtime_error("failed writing checkpoint: " + stem);
  }
  std::filesystem::rename(blob_tmp, blob_path(stem));
  std::filesystem::rename(manifest_tmp, manifest_path(stem));
}

Checkpoint load_checkpoint(const std::string& stem) {
  const std::string mpath = manifest_path(stem);
  std::ifstream manifest(mpath, std::ios::binary);
  if (!manifest) throw std::runtime_error("cannot open checkpoint manifest: " + mpath);
  std::ifstream blob(blob_path(stem), std::ios::binary);
  if (!blob) throw std::runtime_error("cannot open checkpoint blob: " + blob_path(stem));
  std::ostringstream buffer;
  buffer << blob.rdbuf();
  const std::string bytes = buffer.str();

  auto fail = [&](std::size_t line_no, const std::string& what) -> ParseError {
    return ParseError(mpath + ":" + std::to_string(line_no) + ": " + what);
  };

  Checkpoint ck;
  std::string line;
  std::size_t line_no = 0;
  std::size_t expected_offset = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    std::istringstream in(line);
    std::string kind;
    in >> kind;
    if (line_no == 1) {
      int version = 0;
      if (kind != "gasr-checkpoint" || !(in >> version)) throw fail(line_no, "bad magic");
      if (version != Checkpoint::kFormatVersion) throw fail(line_no, "unsupported version " + std::to_string(version));
      continue;
    }
    std::string a, b, c, d, extra;
    if (kind == "meta") {
      if (!(in >> a >> b) || (in >> extra)) throw fail(line_no, "malformed meta line");
      ck.set_meta(a, b);
    } else if (kind == "tensor") {
      if (!(in >> a >> b >> c >> d) || (in >> extra)) throw fail(line_no, "malformed tensor line");
      std::size_t offset = 0, count = 0;
      CheckpointTensor t;
      t.name = a;
      if (!parse_int(b, offset) || !parse_int(c, count) || !parse_shape(d, t.shape)) {
        throw fail(line_no, "malformed tensor fields");
      }
      if (offset != expected_offset) throw fail(line_no, "tensor '" + a + "' offset is not contiguous");
      if (static_cast<Index>(count) != shape_size(t.shape)) throw fail(line_no, "tensor '" + a + "' count/shape mismatch");
      if (offset + count * sizeof(float) > bytes.size()) throw fail(line_no, "tensor '" + a + "' runs past end of blob");
      t.values.resize(count);
      std::memcpy(t.values.data(), bytes.data() + offset, count * sizeof(float));
      expected_offset = offset + count * sizeof(float);
      try {
        ck.add_tensor(std::move(t));
      } catch (const ContractError& e) {
        throw fail(line_no, e.what());
      }
    } else {
      throw fail(line_no, "unknown record '" + kind + "'");
    }
  }
  if (line_no == 0) throw ParseError(mpath + ": empty manifest");
  if (expected_offset != bytes.size()) throw ParseError(blob_path(stem) + ": size does not match manifest");
  return ck;
}

void store_model_config(Checkpoint& ck, const ModelConfig& c) {
  ck.set_meta("model.vocab_size", std::to_string(c.vocab_size));
  ck.set_meta("model.frame_dim", std::to_string(c.frame_dim));
  ck.set_meta("model.hidden", std::to_string(c.hidden));
  ck.set_meta("model.layers", std::to_string(c.layers));
  ck.set_meta("model.heads", std::to_string(c.heads));
  ck.set_meta("model.ffn", std::to_string(c.ffn));
  ck.set_meta("model.max_positions", std::to_string(c.max_positions));
}

ModelConfig load_model_config(const Checkpoint& ck) {
  ModelConfig c;
  auto get = [&](const std::string& key, int& field) {
    if (!parse_int(ck.require_meta(key), field)) throw ParseError("checkpoint: bad integer for '" + key + "'");
  };
  get("model.vocab_size", c.vocab_size);
  get("model.frame_dim", c.frame_dim);
  get("model.hidden", c.hidden);
  get("model.layers", c.layers);
  get("model.heads", c.heads);
  get("model.ffn", c.ffn);
  get("model.max_positions", c.max_positions);
  return c;
}

template <typename S>
void store_parameters(Checkpoint& ck, const PolicyModel<S>& model, const std::string& prefix) {
  for (const auto& p : model.parameters()) {
    CheckpointTensor t;
    t.name = prefix + p.name;
    t.shape = p.value.shape();
    t.values.resize(static_cast<std::size_t>(p.value.size()));
    for (Index i = 0; i < p.value.size(); ++i) t.values[i] = static_cast<float>(p.value.data()(i));
    ck.add_tensor(std::move(t));
  }
}

template <typename S>
void load_parameters(PolicyModel<S>& model, const Checkpoint& ck, const std::string& prefix) {
  for (auto& p : model.parameters()) {
    const auto& t = ck.tensor(prefix + p.name);
    require(t.shape == p.value.shape(), "checkpoint: tensor '" + t.name + "' has shape " + shape_string(t.shape) +
                                            ", model expects " + shape_string(p.value.shape()));
    auto& data = p.value.node()->data;
    for (Index i = 0; i < data.size(); ++i) data(i) = static_cast<S>(t.values[i]);
  }
}

template <typename S>
PolicyModel<S> model_from_checkpoint(const Checkpoint& ck, const std::string& prefix) {
  PolicyModel<S> model(load_model_config(ck), 0);
  load_parameters(model, ck, prefix);
  return model;
}

template void store_parameters(Checkpoint&, const PolicyModel<float>&, const std::string&);
template void store_parameters(Checkpoint&, const PolicyModel<double>&, const std::string&);
template void load_parameters(PolicyModel<float>&, const Checkpoint&, const std::string&);
template void load_parameters(PolicyModel<double>&, const Checkpoint&, const std::string&);
template PolicyModel<float> model_from_checkpoint(const Checkpoint&, const std::string&);
template PolicyModel<double> model_from_checkpoint(const Checkpoint&, const std::string&);

}  // namespace gasr
