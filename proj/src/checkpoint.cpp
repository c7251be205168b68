#include "mgad/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mgad/error.hpp"

namespace mgad {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  std::string str(std::size_t n) { return std::string(take(n), n); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const char* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw IoError("checkpoint truncated");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "DEN" && ck.kind != "EMB") throw std::invalid_argument("checkpoint kind must be DEN or EMB");
  std::string out = "MGAD";
  put<std::uint32_t>(out, kCheckpointVersion);
  out.append(ck.kind);
  out.push_back('\0');
  const std::string header = ck.header.dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
  out.append(header);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.params.tensor_count()));
  for (const auto& [name, t] : ck.params.tensors()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.data()) put<double>(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.str(4) != "MGAD") throw IoError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const std::string kind = r.str(4);
  ck.kind = kind.substr(0, 3);
  if (kind[3] != '\0' || (ck.kind != "DEN" && ck.kind != "EMB")) throw IoError("unknown checkpoint kind");
  const auto header_len = r.get<std::uint32_t>();
  try {
    ck.header = nlohmann::json::parse(r.str(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw IoError("checkpoint tensor '" + name + "' has bad rank");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.get<std::uint64_t>());
      if (d == 0 || d > (std::size_t{1} << 32)) throw IoError("checkpoint tensor '" + name + "' has bad shape");
      n *= d;
    }
    std::vector<double> data(n);
    for (double& v : data) v = r.get<double>();
    ck.params.add(name, Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw IoError("trailing bytes after checkpoint");
  return ck;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("cannot read " + path.string());
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

void to_json(nlohmann::json& j, const ScheduleSpec& s) {
  j = {{"profile", s.profile},
       {"steps", s.steps},
       {"beta_start", s.beta_start},
       {"beta_end", s.beta_end},
       {"respaced_steps", s.respaced_steps}};
}

void from_json(const nlohmann::json& j, ScheduleSpec& s) {
  ScheduleSpec d;
  s.profile = j.value("profile", d.profile);
  s.steps = j.value("steps", d.steps);
  s.beta_start = j.value("beta_start", d.beta_start);
  s.beta_end = j.value("beta_end", d.beta_end);
  s.respaced_steps = j.value("respaced_steps", d.respaced_steps);
}

}  // namespace mgad
