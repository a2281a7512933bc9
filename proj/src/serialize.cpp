#include "bevkit/serialize.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace bevkit {

namespace {

constexpr char kCheckpointMagic[8] = {'B', 'E', 'V', 'C', 'K', 'P', 'T', '1'};

void write_exact(std::ofstream& os, const void* data, std::size_t n) {
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!os) {
        fail("write failed");
    }
}

void read_exact(std::ifstream& is, void* data, std::size_t n) {
    is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (is.gcount() != static_cast<std::streamsize>(n)) {
        fail("unexpected end of file");
    }
}

void write_tensor_payload(std::ofstream& os, const Tensor& t) {
    const auto rank = static_cast<std::uint32_t>(t.rank());
    write_exact(os, &rank, sizeof rank);
    for (std::int64_t i = 0; i < t.rank(); ++i) {
        const auto e = static_cast<std::uint64_t>(t.extent(i));
        write_exact(os, &e, sizeof e);
    }
    write_exact(os, t.data().data(), t.data().size() * sizeof(double));
}

Tensor read_tensor_payload(std::ifstream& is) {
    std::uint32_t rank = 0;
    read_exact(is, &rank, sizeof rank);
    require(rank <= 8, "snapshot rank is implausibly large");
    Shape shape(rank);
    for (auto& e : shape) {
        std::uint64_t v = 0;
        read_exact(is, &v, sizeof v);
        require(v >= 1 && v <= (1ull << 40), "snapshot extent out of range");
        e = static_cast<std::int64_t>(v);
    }
    std::vector<double> data(static_cast<std::size_t>(product(shape)));
    read_exact(is, data.data(), data.size() * sizeof(double));
    return Tensor::from(shape, data);
}

}  // namespace

void save_tensor(const Tensor& t, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        fail("cannot open for writing: " + path.string());
    }
    write_tensor_payload(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        fail("cannot open: " + path.string());
    }
    Tensor t = read_tensor_payload(is);
    is.peek();
    require(is.eof(), "trailing bytes after snapshot payload");
    return t;
}

void save_tensor_json(const Tensor& t, const std::filesystem::path& path) {
    nlohmann::json j;
    j["shape"] = t.shape();
    j["data"] = std::vector<double>(t.data().begin(), t.data().end());
    std::ofstream os(path, std::ios::trunc);
    if (!os) {
        fail("cannot open for writing: " + path.string());
    }
    os << j.dump(2) << '\n';
}

Tensor load_tensor_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        fail("cannot open: " + path.string());
    }
    nlohmann::json j = nlohmann::json::parse(is);
    const auto shape = j.at("shape").get<Shape>();
    const auto data = j.at("data").get<std::vector<double>>();
    return Tensor::from(shape, data);
}

void ParamRegistry::add(const std::string& name, const Tensor& t) {
    require(!name.empty(), "parameter name must not be empty");
    for (const auto& [n, _] : entries_) {
        require(n != name, "duplicate parameter name: " + name);
    }
    entries_.emplace_back(name, t);
}

Tensor ParamRegistry::find(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
        if (n == name) {
            return t;
        }
    }
    fail("unknown parameter: " + name);
}

std::int64_t ParamRegistry::total_params() const {
    std::int64_t n = 0;
    for (const auto& [_, t] : entries_) {
        n += t.numel();
    }
    return n;
}

void ParamRegistry::save_checkpoint(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        fail("cannot open for writing: " + path.string());
    }
    write_exact(os, kCheckpointMagic, sizeof kCheckpointMagic);
    const auto count = static_cast<std::uint64_t>(entries_.size());
    write_exact(os, &count, sizeof count);
    for (const auto& [name, t] : entries_) {
        const auto len = static_cast<std::uint32_t>(name.size());
        write_exact(os, &len, sizeof len);
        write_exact(os, name.data(), name.size());
        write_tensor_payload(os, t);
    }
}

void ParamRegistry::load_checkpoint(const std::filesystem::path& path) const {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        fail("cannot open: " + path.string());
    }
    char magic[sizeof kCheckpointMagic];
    read_exact(is, magic, sizeof magic);
    require(std::memcmp(magic, kCheckpointMagic, sizeof magic) == 0,
            "not a checkpoint file: " + path.string());
    std::uint64_t count = 0;
    read_exact(is, &count, sizeof count);
    require(count == entries_.size(),
            "checkpoint parameter count does not match this model");
    for (const auto& [name, t] : entries_) {
        std::uint32_t len = 0;
        read_exact(is, &len, sizeof len);
        std::string stored(len, '\0');
        read_exact(is, stored.data(), len);
        require(stored == name, "checkpoint parameter order mismatch at " + name);
        Tensor loaded = read_tensor_payload(is);
        require(loaded.shape() == t.shape(),
                "checkpoint shape mismatch for " + name);
        Tensor dst = t;  // shared handle, writes reach the registered tensor
        std::copy(loaded.data().begin(), loaded.data().end(), dst.data().begin());
    }
    is.peek();
    require(is.eof(), "trailing bytes after checkpoint payload");
}

void ParamRegistry::save_checkpoint_json(const std::filesystem::path& path) const {
    nlohmann::json j;
    j["format"] = "bevckpt1";
    auto& params = j["params"];
    params = nlohmann::json::array();
    for (const auto& [name, t] : entries_) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t.shape();
        e["data"] = std::vector<double>(t.data().begin(), t.data().end());
        params.push_back(std::move(e));
    }
    std::ofstream os(path, std::ios::trunc);
    if (!os) {
        fail("cannot open for writing: " + path.string());
    }
    os << j.dump(2) << '\n';
}

}  // namespace bevkit
