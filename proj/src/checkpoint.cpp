#include "dito/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include <zlib.h>

#include "dito/errors.hpp"

namespace dito {
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'D', 'I', 'T', 'O', 'C', 'K', 'P', 'T'};

const std::map<std::string, torch::ScalarType>& dtype_table() {
    static const std::map<std::string, torch::ScalarType> table{
        {"float32", torch::kFloat32}, {"float64", torch::kFloat64}, {"int64", torch::kInt64},
        {"int32", torch::kInt32},     {"uint8", torch::kUInt8},
    };
    return table;
}

std::string dtype_name(torch::ScalarType type) {
    for (const auto& [name, t] : dtype_table()) {
        if (t == type) return name;
    }
    throw IoError(std::string("unsupported dtype in checkpoint: ") + c10::toString(type));
}

template <typename T>
void append_pod(std::string& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T read_pod(const std::string& in, size_t offset) {
    if (offset + sizeof(T) > in.size()) {
        throw IoError("checkpoint is truncated");
    }
    T value;
    std::memcpy(&value, in.data() + offset, sizeof(T));
    return value;
}

uint32_t crc_of(const char* data, size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks to stay portable for large files
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<size_t>(n, 1u << 30));
        crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<uint32_t>(crc);
}

}  // namespace

const torch::Tensor& Checkpoint::array(const std::string& name) const {
    for (const auto& [key, value] : arrays) {
        if (key == name) return value;
    }
    throw IoError("checkpoint has no array named " + name);
}

bool Checkpoint::has_array(const std::string& name) const {
    for (const auto& [key, value] : arrays) {
        if (key == name) return true;
    }
    return false;
}

fs::path checkpoint_path(const fs::path& dir, int64_t step) {
    std::ostringstream name;
    name << "ckpt_" << std::setw(8) << std::setfill('0') << step << ".ckpt";
    return dir / name.str();
}

void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint) {
    nlohmann::json header;
    header["kind"] = checkpoint.kind;
    header["step"] = checkpoint.step;
    header["config"] = checkpoint.config;
    header["arrays"] = nlohmann::json::array();

    std::string payload;
    for (const auto& [name, tensor] : checkpoint.arrays) {
        auto t = tensor.detach().cpu().contiguous();
        const auto nbytes = static_cast<size_t>(t.numel()) * t.element_size();
        header["arrays"].push_back({{"name", name},
                                    {"dtype", dtype_name(t.scalar_type())},
                                    {"shape", t.sizes().vec()},
                                    {"offset", payload.size()},
                                    {"nbytes", nbytes}});
        payload.append(static_cast<const char*>(t.data_ptr()), nbytes);
    }
    const std::string header_text = header.dump();

    std::string blob(kMagic, sizeof(kMagic));
    append_pod<uint32_t>(blob, checkpoint.format_version);
    append_pod<uint64_t>(blob, header_text.size());
    blob += header_text;
    blob += payload;
    append_pod<uint32_t>(blob, crc_of(blob.data(), blob.size()));

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (blob.size() < sizeof(kMagic) + 16 || std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0) {
        throw IoError(path.string() + " is not a checkpoint file");
    }
    const auto stored_crc = read_pod<uint32_t>(blob, blob.size() - 4);
    if (crc_of(blob.data(), blob.size() - 4) != stored_crc) {
        throw IoError("checksum mismatch in " + path.string());
    }

    Checkpoint ckpt;
    ckpt.format_version = read_pod<uint32_t>(blob, 8);
    if (ckpt.format_version != kCheckpointFormatVersion) {
        throw IoError("unsupported checkpoint format version " + std::to_string(ckpt.format_version));
    }
    const auto header_len = read_pod<uint64_t>(blob, 12);
    const size_t header_start = 20;
    if (header_start + header_len > blob.size() - 4) throw IoError("checkpoint is truncated");
    const auto header = nlohmann::json::parse(blob.substr(header_start, header_len));
    const size_t data_start = header_start + header_len;
    const size_t data_size = blob.size() - 4 - data_start;

    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.step = header.at("step").get<int64_t>();
    ckpt.config = header.at("config");
    for (const auto& entry : header.at("arrays")) {
        const auto name = entry.at("name").get<std::string>();
        const auto dtype = dtype_table().find(entry.at("dtype").get<std::string>());
        if (dtype == dtype_table().end()) throw IoError("unknown dtype for array " + name);
        const auto shape = entry.at("shape").get<std::vector<int64_t>>();
        const auto offset = entry.at("offset").get<size_t>();
        const auto nbytes = entry.at("nbytes").get<size_t>();
        if (offset + nbytes > data_size) throw IoError("array " + name + " runs past the end of the checkpoint");
        auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype->second));
        if (static_cast<size_t>(t.numel()) * t.element_size() != nbytes) {
            throw IoError("array " + name + " size does not match its shape");
        }
        std::memcpy(t.data_ptr(), blob.data() + data_start + offset, nbytes);
        ckpt.arrays.emplace_back(name, t);
    }
    return ckpt;
}

}  // namespace dito
