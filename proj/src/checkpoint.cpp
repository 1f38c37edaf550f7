#include "nlf/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace nlf {

namespace {

constexpr char kMagic[4] = {'N', 'L', 'F', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = (unsigned char)((v >> (8 * i)) & 0xff);
  os.write((const char*)b, 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read((char*)b, 8);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= (std::uint64_t)b[i] << (8 * i);
  return v;
}

void put_f64(std::ostream& os, const double* d, std::size_t n) {
  // x86-64 is little-endian; write raw.
  os.write((const char*)d, (std::streamsize)(n * sizeof(double)));
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, ad::Tensor>>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  os.write(kMagic, 4);
  put_u64(os, tensors.size());
  for (const auto& [name, t] : tensors) {
    put_u64(os, name.size());
    os.write(name.data(), (std::streamsize)name.size());
    put_u64(os, t.shape().size());
    for (auto d : t.shape()) put_u64(os, d);
    put_f64(os, t.val().data(), t.size());
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

std::map<std::string, ad::Tensor> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  std::uint64_t count = get_u64(is);
  std::map<std::string, ad::Tensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint64_t nlen = get_u64(is);
    std::string name(nlen, '\0');
    is.read(name.data(), (std::streamsize)nlen);
    std::uint64_t rank = get_u64(is);
    ad::Shape shape(rank);
    for (auto& d : shape) d = get_u64(is);
    std::vector<double> data(ad::numel(shape));
    is.read((char*)data.data(), (std::streamsize)(data.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor '" + name + "'");
    out.emplace(name, ad::Tensor::from(std::move(shape), std::move(data)));
  }
  return out;
}

void load_checkpoint_into(const std::string& path,
                          std::vector<std::pair<std::string, ad::Tensor>> tensors) {
  auto loaded = load_checkpoint(path);
  for (auto& [name, t] : tensors) {
    auto it = loaded.find(name);
    if (it == loaded.end())
      throw std::runtime_error("checkpoint: missing tensor '" + name + "' in " + path);
    if (it->second.shape() != t.shape())
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': file " +
                               ad::shape_str(it->second.shape()) + ", wanted " +
                               ad::shape_str(t.shape()));
    auto src = it->second.val();
    auto dst = t.val_mut();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace nlf
