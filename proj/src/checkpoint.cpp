// SPDX-License-Identifier: Apache-2.0

#include "qavit/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace qavit {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

template <class U>
void put(std::string& out, U v) {
    char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    out.append(b, sizeof(U));
}

class Reader {
  public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    template <class U>
    U get() {
        need(sizeof(U));
        U v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
        pos_ += sizeof(U);
        return v;
    }
    std::string_view take(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }

  private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            throw IntegrityError("archive truncated at byte " + std::to_string(pos_));
        }
    }
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::string_view bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
    return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::string serialize_tensors(const std::vector<NamedTensor>& tensors) {
    std::string out = "QAVT";
    put<std::uint32_t>(out, checkpoint_version);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        if (name.size() > 0xffff) {
            throw std::invalid_argument("tensor name too long: " + name.substr(0, 32) + "...");
        }
        put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out += name;
        put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype()));
        put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
        for (auto d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        dispatch(t.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto v = t.values<T>();
            out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
        });
    }
    put<std::uint32_t>(out, crc_of(out));
    return out;
}

std::vector<NamedTensor> parse_tensors(std::string_view bytes) {
    if (bytes.size() < 16 || bytes.substr(0, 4) != "QAVT") {
        throw IntegrityError("not a checkpoint archive (bad magic)");
    }
    const auto body = bytes.substr(0, bytes.size() - 4);
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + body.size(), 4);
    if (crc_of(body) != stored) {
        throw IntegrityError("checkpoint CRC mismatch");
    }
    Reader r(body);
    r.take(4);
    if (const auto version = r.get<std::uint32_t>(); version != checkpoint_version) {
        throw IntegrityError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto count = r.get<std::uint32_t>();
    std::vector<NamedTensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = r.get<std::uint16_t>();
        std::string name(r.take(len));
        const auto dt = r.get<std::uint8_t>();
        if (dt > 1) {
            throw IntegrityError("entry '" + name + "' has unknown dtype " + std::to_string(dt));
        }
        const DType dtype = static_cast<DType>(dt);
        Shape shape(r.get<std::uint8_t>());
        for (auto& d : shape) d = r.get<std::uint32_t>();
        Tensor t = Tensor::zeros(shape, dtype);
        dispatch(dtype, [&](auto tag) {
            using T = decltype(tag);
            auto v = t.values<T>();
            auto raw = r.take(v.size() * sizeof(T));
            std::memcpy(v.data(), raw.data(), raw.size());
        });
        out.push_back({std::move(name), std::move(t)});
    }
    if (r.pos() != body.size()) {
        throw IntegrityError("trailing bytes after the last entry");
    }
    return out;
}

std::string serialize_registry(const ParameterRegistry& registry) {
    std::vector<NamedTensor> tensors;
    for (const auto& e : registry.entries()) tensors.push_back({e.name, e.tensor});
    return serialize_tensors(tensors);
}

void load_registry(std::string_view bytes, ParameterRegistry& registry) {
    auto tensors = parse_tensors(bytes);
    std::set<std::string> seen;
    for (const auto& [name, t] : tensors) {
        if (!registry.contains(name)) {
            throw ShapeError("checkpoint entry '" + name + "' is not a model parameter");
        }
        if (!seen.insert(name).second) {
            throw ShapeError("checkpoint entry '" + name + "' appears twice");
        }
        auto& e = registry.at(name);
        if (e.tensor.dtype() != t.dtype() || e.tensor.shape() != t.shape()) {
            throw ShapeError("checkpoint entry '" + name + "' is " + dtype_name(t.dtype()) +
                             shape_str(t.shape()) + ", model expects " +
                             dtype_name(e.tensor.dtype()) + shape_str(e.tensor.shape()));
        }
    }
    if (seen.size() != registry.entries().size()) {
        for (const auto& e : registry.entries()) {
            if (!seen.contains(e.name)) {
                throw ShapeError("checkpoint is missing parameter '" + e.name + "'");
            }
        }
    }
    for (const auto& [name, t] : tensors) {
        auto& e = registry.at(name);
        dispatch(t.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto src = t.values<T>();
            auto dst = e.tensor.values<T>();
            std::copy(src.begin(), src.end(), dst.begin());
        });
    }
}

std::string serialize_optimizer(const OptimizerState& opt) {
    std::vector<NamedTensor> tensors;
    const double step = static_cast<double>(opt.step);
    tensors.push_back({"opt.step", Tensor::from_values({1}, std::span<const double>(&step, 1),
                                                       DType::f64)});
    for (const auto& [name, slot] : opt.slots) {
        tensors.push_back({"opt.m." + name, Tensor::from_values({slot.m.size()}, slot.m, DType::f64)});
        tensors.push_back({"opt.v." + name, Tensor::from_values({slot.v.size()}, slot.v, DType::f64)});
    }
    return serialize_tensors(tensors);
}

OptimizerState parse_optimizer(std::string_view bytes, const ParameterRegistry& registry) {
    OptimizerState opt = OptimizerState::create(registry);
    std::map<std::string, Tensor> by_name;
    for (auto& [name, t] : parse_tensors(bytes)) by_name.emplace(name, t);
    auto it = by_name.find("opt.step");
    if (it == by_name.end() || it->second.numel() != 1) {
        throw ShapeError("optimizer state has no step counter");
    }
    opt.step = static_cast<std::size_t>(it->second.at(0));
    if (by_name.size() != 1 + 2 * opt.slots.size()) {
        throw ShapeError("optimizer state does not match the trainable parameters");
    }
    for (auto& [name, slot] : opt.slots) {
        auto m = by_name.find("opt.m." + name), v = by_name.find("opt.v." + name);
        if (m == by_name.end() || v == by_name.end() || m->second.numel() != slot.m.size() ||
            v->second.numel() != slot.v.size()) {
            throw ShapeError("optimizer state for '" + name + "' is missing or mis-sized");
        }
        slot.m = m->second.to_vector();
        slot.v = v->second.to_vector();
    }
    return opt;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error("cannot write " + tmp.string());
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw std::runtime_error("write failed for " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace qavit
