#include "repflow/io.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <set>

namespace repflow {

namespace binio {

namespace {

template <typename U>
void put_le(std::ostream& os, U v) {
    char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF);
    os.write(buf, sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
    unsigned char buf[sizeof(U)];
    read_bytes(is, reinterpret_cast<char*>(buf), sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return static_cast<U>(v);
}

}  // namespace

void write_u16(std::ostream& os, std::uint16_t v) { put_le(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { put_le(os, v); }
void write_i32(std::ostream& os, std::int32_t v) { put_le(os, static_cast<std::uint32_t>(v)); }
void write_u64(std::ostream& os, std::uint64_t v) { put_le(os, v); }

void write_f32(std::ostream& os, const float* data, std::size_t n) {
    static_assert(sizeof(float) == 4);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, data + i, 4);
        put_le(os, bits);
    }
}

void read_bytes(std::istream& is, char* data, std::size_t n) {
    is.read(data, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) throw CorruptFile("unexpected end of file");
}

std::uint16_t read_u16(std::istream& is) { return get_le<std::uint16_t>(is); }
std::uint32_t read_u32(std::istream& is) { return get_le<std::uint32_t>(is); }
std::int32_t read_i32(std::istream& is) { return static_cast<std::int32_t>(get_le<std::uint32_t>(is)); }
std::uint64_t read_u64(std::istream& is) { return get_le<std::uint64_t>(is); }

void read_f32(std::istream& is, float* data, std::size_t n) {
    std::vector<unsigned char> buf(n * 4);
    read_bytes(is, reinterpret_cast<char*>(buf.data()), buf.size());
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t bits = static_cast<std::uint32_t>(buf[4 * i]) | (static_cast<std::uint32_t>(buf[4 * i + 1]) << 8) |
                                   (static_cast<std::uint32_t>(buf[4 * i + 2]) << 16) |
                                   (static_cast<std::uint32_t>(buf[4 * i + 3]) << 24);
        std::memcpy(data + i, &bits, 4);
    }
}

}  // namespace binio

using namespace binio;

namespace {

constexpr char kCheckpointMagic[4] = {'R', 'F', 'C', 'K'};

template <class M>
constexpr bool is_row_vector() {
    return std::decay_t<M>::RowsAtCompileTime == 1;
}

std::string describe_config_diff(const ModelConfig& want, const ModelConfig& have) {
    const auto a = want.to_json();
    const auto b = have.to_json();
    std::string out;
    for (auto it = a.begin(); it != a.end(); ++it)
        if (!b.contains(it.key()) || b.at(it.key()) != it.value())
            out += (out.empty() ? "" : ", ") + it.key() + " expected " + it.value().dump() + " found " +
                   (b.contains(it.key()) ? b.at(it.key()).dump() : "nothing");
    return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocab& vocab,
                     const Vocab* target_vocab) {
    nlohmann::json header = {{"model", model.config().to_json()}, {"vocab", vocab.to_json()}};
    header["target_vocab"] = target_vocab ? target_vocab->to_json() : nlohmann::json(nullptr);
    const std::string blob = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write checkpoint " + path.string());
    os.write(kCheckpointMagic, 4);
    write_u32(os, kCheckpointVersion);
    write_u32(os, static_cast<std::uint32_t>(blob.size()));
    os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    model.params().for_each([&](const std::string& name, const auto& m) {
        write_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        if constexpr (is_row_vector<decltype(m)>()) {
            write_u32(os, 1);
            write_u64(os, static_cast<std::uint64_t>(m.cols()));
            write_f32(os, m.data(), static_cast<std::size_t>(m.size()));
        } else {
            write_u32(os, 2);
            write_u64(os, static_cast<std::uint64_t>(m.rows()));
            write_u64(os, static_cast<std::uint64_t>(m.cols()));
            // Row-major on disk.
            const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
            write_f32(os, rm.data(), static_cast<std::size_t>(rm.size()));
        }
    });
    if (!os) throw Error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open checkpoint " + path.string());
    char magic[4];
    read_bytes(is, magic, 4);
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CorruptFile(path.string() + ": not a checkpoint (bad magic)");
    const auto version = read_u32(is);
    if (version != kCheckpointVersion)
        throw VersionMismatch(path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
    const auto blob_len = read_u32(is);
    if (blob_len > (1u << 30)) throw CorruptFile(path.string() + ": implausible header length");
    std::string blob(blob_len, '\0');
    read_bytes(is, blob.data(), blob_len);

    nlohmann::json header;
    ModelConfig config;
    std::optional<Vocab> vocab, target;
    try {
        header = nlohmann::json::parse(blob);
        config = ModelConfig::from_json(header.at("model"));
        vocab = Vocab::from_json(header.at("vocab"));
        if (header.contains("target_vocab") && !header["target_vocab"].is_null())
            target = Vocab::from_json(header["target_vocab"]);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile(path.string() + ": malformed checkpoint header: " + e.what());
    }
    if (expected && !(*expected == config))
        throw InvalidArgument(path.string() + ": checkpoint configuration mismatch (" +
                              describe_config_diff(*expected, config) + ")");

    Params<float> params;
    {
        ModelConfig shape = config;
        shape.seed = 0;
        params = Model(shape).params();
    }
    std::map<std::string, std::function<void(std::istream&, std::uint32_t)>> readers;
    params.for_each([&](const std::string& name, auto& m) {
        readers[name] = [&m, name, &path](std::istream& in, std::uint32_t rank) {
            auto mismatch = [&] { return CorruptFile(path.string() + ": tensor " + name + " has the wrong shape"); };
            if constexpr (is_row_vector<decltype(m)>()) {
                if (rank != 1) throw mismatch();
                if (read_u64(in) != static_cast<std::uint64_t>(m.cols())) throw mismatch();
                read_f32(in, m.data(), static_cast<std::size_t>(m.size()));
            } else {
                if (rank != 2) throw mismatch();
                const auto r = read_u64(in);
                const auto c = read_u64(in);
                if (r != static_cast<std::uint64_t>(m.rows()) || c != static_cast<std::uint64_t>(m.cols())) throw mismatch();
                Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(m.rows(), m.cols());
                read_f32(in, rm.data(), static_cast<std::size_t>(rm.size()));
                m = rm;
            }
        };
    });
    std::set<std::string> seen;
    while (is.peek() != std::char_traits<char>::eof()) {
        const auto name_len = read_u32(is);
        if (name_len > 4096) throw CorruptFile(path.string() + ": implausible tensor name length");
        std::string name(name_len, '\0');
        read_bytes(is, name.data(), name_len);
        auto it = readers.find(name);
        if (it == readers.end()) throw CorruptFile(path.string() + ": unexpected tensor " + name);
        if (!seen.insert(name).second) throw CorruptFile(path.string() + ": duplicate tensor " + name);
        it->second(is, read_u32(is));
    }
    for (const auto& [name, _] : readers)
        if (!seen.count(name)) throw CorruptFile(path.string() + ": missing tensor " + name);
    bool finite = true;
    params.for_each([&](const std::string&, const auto& m) { finite = finite && m.allFinite(); });
    if (!finite) throw CorruptFile(path.string() + ": non-finite parameter values");
    return Checkpoint{Model(config, std::move(params)), std::move(*vocab), std::move(target)};
}

}  // namespace repflow
