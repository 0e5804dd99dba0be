#include "dumo/archive.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <fstream>
#include <memory>

#include "dumo/errors.hpp"

namespace dumo {
namespace {

constexpr std::array<char, 4> kMagic{'D', 'M', 'T', 'A'};
constexpr std::uint32_t kVersion = 1;

std::uint8_t dtype_code(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return 0;
    case torch::kFloat64: return 1;
    case torch::kInt64: return 2;
    default: throw InputError("archive: unsupported dtype " + std::string(c10::toString(t)));
  }
}

torch::ScalarType dtype_from(std::uint8_t code) {
  switch (code) {
    case 0: return torch::kFloat32;
    case 1: return torch::kFloat64;
    case 2: return torch::kInt64;
    default: throw PreconditionError("archive: corrupt dtype code");
  }
}

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw PreconditionError("archive: truncated file");
  return v;
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr);
  }
  void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_.get(), data, n); }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), md.data(), &len);
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
      out.push_back(digits[md[i] >> 4]);
      out.push_back(digits[md[i] & 0xf]);
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

}  // namespace

void save_tensors(const std::filesystem::path& path, const TensorMap& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw PreconditionError("cannot write " + path.string());
  os.write(kMagic.data(), kMagic.size());
  put(os, kVersion);
  put(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, value] : tensors) {
    const torch::Tensor t = value.detach().contiguous().cpu();
    put(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(os, dtype_code(t.scalar_type()));
    put(os, static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.sizes()) put(os, static_cast<std::int64_t>(d));
    os.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
  }
}

TensorMap load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw PreconditionError("missing tensor archive: " + path.string());
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (magic != kMagic) throw PreconditionError(path.string() + " is not a tensor archive");
  if (get<std::uint32_t>(is) != kVersion)
    throw PreconditionError(path.string() + ": unsupported archive version");
  const auto count = get<std::uint32_t>(is);
  TensorMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get<std::uint32_t>(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto dtype = dtype_from(get<std::uint8_t>(is));
    std::vector<std::int64_t> dims(get<std::uint32_t>(is));
    for (auto& d : dims) d = get<std::int64_t>(is);
    torch::Tensor t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
    is.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(t.nbytes()));
    if (!is) throw PreconditionError(path.string() + ": truncated tensor '" + name + "'");
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors,
                     const Json& metadata) {
  save_tensors(path, tensors);
  std::ofstream os(path.string() + ".json");
  os << metadata.dump(2) << '\n';
}

Json load_sidecar(const std::filesystem::path& path) {
  std::ifstream is(path.string() + ".json");
  if (!is) throw PreconditionError("missing metadata sidecar: " + path.string() + ".json");
  try {
    return Json::parse(is);
  } catch (const Json::parse_error& e) {
    throw PreconditionError(path.string() + ".json: " + e.what());
  }
}

std::string sha256_hex(const void* data, std::size_t size) {
  Sha256 h;
  h.update(data, size);
  return h.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw PreconditionError("cannot hash missing file " + path.string());
  Sha256 h;
  std::array<char, 1 << 16> buf{};
  while (is) {
    is.read(buf.data(), buf.size());
    h.update(buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  return h.hex();
}

std::string tensor_checksum(const TensorMap& tensors) {
  Sha256 h;
  for (const auto& [name, value] : tensors) {
    const torch::Tensor t = value.detach().contiguous().cpu();
    h.update(name.data(), name.size());
    const auto code = dtype_code(t.scalar_type());
    h.update(&code, 1);
    for (auto d : t.sizes()) {
      const auto dim = static_cast<std::int64_t>(d);
      h.update(&dim, sizeof dim);
    }
    h.update(t.data_ptr(), t.nbytes());
  }
  return h.hex();
}

TensorMap named_state(const torch::nn::Module& module) {
  TensorMap out;
  for (const auto& item : module.named_parameters(true)) out.emplace(item.key(), item.value());
  for (const auto& item : module.named_buffers(true)) out.emplace(item.key(), item.value());
  return out;
}

void load_named_state(torch::nn::Module& module, const TensorMap& tensors,
                      const std::string& source) {
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& name, torch::Tensor& dst) {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw PreconditionError(source + ": missing tensor '" + name + "'");
    if (!it->second.sizes().equals(dst.sizes()))
      throw PreconditionError(source + ": shape mismatch for '" + name + "'");
    dst.copy_(it->second);
  };
  for (auto& item : module.named_parameters(true)) assign(item.key(), item.value());
  for (auto& item : module.named_buffers(true)) assign(item.key(), item.value());
}

std::string parameter_checksum(const torch::nn::Module& module) {
  return tensor_checksum(named_state(module));
}

}  // namespace dumo
