#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "langalign/model.hpp"

namespace langalign {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in native little-endian order");

constexpr std::size_t kAlignment = 64;

std::size_t align_up(std::size_t n) { return (n + kAlignment - 1) / kAlignment * kAlignment; }

template <typename T>
constexpr const char* dtype_name() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["vocab_size"] = c.vocab_size;
    j["d_model"] = c.d_model;
    j["n_layers"] = c.n_layers;
    j["n_heads"] = c.n_heads;
    j["n_kv_heads"] = c.n_kv_heads;
    j["d_ff"] = c.d_ff;
    j["max_seq_len"] = c.max_seq_len;
    j["rope_theta"] = c.rope_theta;
    j["norm_eps"] = c.norm_eps;
    return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_kv_heads = j.at("n_kv_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.rope_theta = j.at("rope_theta").get<double>();
    c.norm_eps = j.at("norm_eps").get<double>();
    return c;
}

template <typename V>
void write_le(std::ostream& out, V value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

template <typename V>
V read_le(const std::string& bytes, std::size_t offset) {
    V value;
    std::memcpy(&value, bytes.data() + offset, sizeof(V));
    return value;
}

}  // namespace

template <typename T>
void save_checkpoint(const ModelParams<T>& params, const std::filesystem::path& path) {
    params.validate();
    const auto named = params.named();

    nlohmann::ordered_json header;
    header["format"] = "langalign-checkpoint";
    header["config"] = config_to_json(params.config);
    nlohmann::ordered_json directory = nlohmann::ordered_json::array();
    std::size_t offset = 0;
    for (const auto& [name, t] : named) {
        offset = align_up(offset);
        nlohmann::ordered_json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["dtype"] = dtype_name<T>();
        entry["offset"] = offset;
        entry["bytes"] = t.numel() * sizeof(T);
        directory.push_back(entry);
        offset += t.numel() * sizeof(T);
    }
    header["payload_bytes"] = offset;
    header["tensors"] = directory;
    const std::string header_text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw CheckpointError("cannot write checkpoint " + path.string());
        }
        out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
        write_le<std::uint32_t>(out, kCheckpointVersion);
        write_le<std::uint64_t>(out, header_text.size());
        out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
        const std::size_t prefix = sizeof(kCheckpointMagic) + 4 + 8 + header_text.size();
        const std::size_t payload_origin = align_up(prefix);
        const std::string zeros(kAlignment, '\0');
        out.write(zeros.data(), static_cast<std::streamsize>(payload_origin - prefix));
        std::size_t written = 0;
        for (std::size_t i = 0; i < named.size(); ++i) {
            const std::size_t target = directory[i]["offset"].get<std::size_t>();
            out.write(zeros.data(), static_cast<std::streamsize>(target - written));
            auto d = named[i].second.data();
            out.write(reinterpret_cast<const char*>(d.data()),
                      static_cast<std::streamsize>(d.size() * sizeof(T)));
            written = target + d.size() * sizeof(T);
        }
        if (!out) {
            throw CheckpointError("failed writing checkpoint " + path.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

template <typename T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CheckpointError("cannot open checkpoint " + path.string());
    }
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::size_t fixed = sizeof(kCheckpointMagic) + 4 + 8;
    if (bytes.size() < fixed) {
        throw CheckpointError("checkpoint truncated: " + path.string());
    }
    if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        throw CheckpointError("not a checkpoint (bad magic): " + path.string());
    }
    const auto version = read_le<std::uint32_t>(bytes, sizeof(kCheckpointMagic));
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto header_len = read_le<std::uint64_t>(bytes, sizeof(kCheckpointMagic) + 4);
    if (header_len > bytes.size() - fixed) {
        throw CheckpointError("checkpoint header length exceeds file size");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(fixed, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }

    ModelParams<T> params;
    try {
        params = zero_params<T>(config_from_json(header.at("config")));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
    }

    const std::size_t payload_origin = align_up(fixed + header_len);
    std::size_t payload_bytes = 0;
    try {
        payload_bytes = header.at("payload_bytes").get<std::size_t>();
    } catch (const nlohmann::json::exception&) {
        throw CheckpointError("checkpoint header lacks payload_bytes");
    }
    if (bytes.size() != payload_origin + payload_bytes) {
        throw CheckpointError("checkpoint size " + std::to_string(bytes.size()) +
                              " disagrees with header-declared length " +
                              std::to_string(payload_origin + payload_bytes));
    }

    auto named = params.named();
    const auto& directory = header.at("tensors");
    if (!directory.is_array() || directory.size() != named.size()) {
        throw CheckpointError("checkpoint tensor directory does not match the config");
    }
    // Stage everything first so a bad entry leaves no partially loaded model.
    std::vector<std::vector<T>> staged(named.size());
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto& entry = directory[i];
        const auto& [name, t] = named[i];
        if (entry.at("name").get<std::string>() != name) {
            throw CheckpointError("checkpoint tensor " + std::to_string(i) + " is '" +
                                  entry.at("name").get<std::string>() + "', expected '" + name +
                                  "'");
        }
        if (entry.at("shape").get<Shape>() != t.shape()) {
            throw CheckpointError("checkpoint tensor " + name + " shape disagrees with config");
        }
        const auto dtype = entry.at("dtype").get<std::string>();
        const std::size_t elem = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
        if (elem == 0) {
            throw CheckpointError("checkpoint tensor " + name + " has unknown dtype " + dtype);
        }
        const auto offset = entry.at("offset").get<std::size_t>();
        const auto nbytes = entry.at("bytes").get<std::size_t>();
        if (nbytes != t.numel() * elem || offset % kAlignment != 0 ||
            offset + nbytes > payload_bytes) {
            throw CheckpointError("checkpoint tensor " + name + " has an invalid extent");
        }
        auto& dst = staged[i];
        dst.resize(t.numel());
        const char* src = bytes.data() + payload_origin + offset;
        for (std::size_t k = 0; k < t.numel(); ++k) {
            if (elem == 4) {
                float v;
                std::memcpy(&v, src + k * 4, 4);
                dst[k] = static_cast<T>(v);
            } else {
                double v;
                std::memcpy(&v, src + k * 8, 8);
                dst[k] = static_cast<T>(v);
            }
        }
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
        std::copy(staged[i].begin(), staged[i].end(), named[i].second.mutable_data().begin());
    }
    params.validate();
    return params;
}

template void save_checkpoint(const ModelParams<float>&, const std::filesystem::path&);
template void save_checkpoint(const ModelParams<double>&, const std::filesystem::path&);
template ModelParams<float> load_checkpoint(const std::filesystem::path&);
template ModelParams<double> load_checkpoint(const std::filesystem::path&);

}  // namespace langalign
