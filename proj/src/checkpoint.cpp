#include "opera/checkpoint.hpp"

namespace opera::ad {

namespace {

constexpr const char* kMetaPrefix = "__meta__:";

void write_entry(std::string& buf, const std::string& name, const Array<float>& a) {
    if (name.size() > 65535) throw ContractError("checkpoint entry name too long");
    le::write<uint16_t>(buf, static_cast<uint16_t>(name.size()));
    buf += name;
    if (a.dims.size() > 255) throw ContractError("checkpoint tensor rank too large");
    le::write<uint8_t>(buf, static_cast<uint8_t>(a.dims.size()));
    for (int64_t d : a.dims) le::write<uint32_t>(buf, static_cast<uint32_t>(d));
    for (float v : a.v) le::write<float>(buf, v);
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore<float>& ps,
                     const std::map<std::string, std::string>& meta) {
    for (const auto& kv : ps.values)
        if (kv.first.rfind(kMetaPrefix, 0) == 0)
            throw ContractError("parameter name collides with reserved meta prefix: " + kv.first);
    std::string buf;
    buf += "OPCK";
    le::write<uint32_t>(buf, 1);
    le::write<uint32_t>(buf, static_cast<uint32_t>(ps.values.size() + meta.size()));
    for (const auto& [name, value] : ps.values) write_entry(buf, name, value);
    for (const auto& [key, text] : meta) {
        Array<float> bytes = Array<float>::zeros({static_cast<int64_t>(text.size())});
        for (size_t i = 0; i < text.size(); ++i)
            bytes.v[i] = static_cast<float>(static_cast<unsigned char>(text[i]));
        write_entry(buf, kMetaPrefix + key, bytes);
    }
    write_file(path, buf);
}

ParamStore<float> load_checkpoint(const std::string& path,
                                  std::map<std::string, std::string>* meta) {
    const std::string buf = read_file(path);
    if (buf.size() < 12 || buf.compare(0, 4, "OPCK") != 0)
        throw IoError("not a checkpoint archive: " + path);
    size_t off = 4;
    const uint32_t version = le::read<uint32_t>(buf, off);
    if (version != 1) throw IoError("unsupported checkpoint version in " + path);
    const uint32_t count = le::read<uint32_t>(buf, off);

    ParamStore<float> ps;
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t name_len = le::read<uint16_t>(buf, off);
        if (off + name_len > buf.size()) throw IoError("truncated checkpoint: " + path);
        const std::string name = buf.substr(off, name_len);
        off += name_len;
        const uint8_t ndim = le::read<uint8_t>(buf, off);
        Shape dims(ndim);
        for (uint8_t d = 0; d < ndim; ++d) dims[d] = le::read<uint32_t>(buf, off);
        const int64_t n = shape_numel(dims);
        Array<float> a = Array<float>::zeros(dims);
        for (int64_t j = 0; j < n; ++j) a.v[static_cast<size_t>(j)] = le::read<float>(buf, off);

        if (name.rfind(kMetaPrefix, 0) == 0) {
            if (meta) {
                std::string text(a.v.size(), '\0');
                for (size_t j = 0; j < a.v.size(); ++j)
                    text[j] = static_cast<char>(static_cast<unsigned char>(a.v[j]));
                (*meta)[name.substr(std::string(kMetaPrefix).size())] = text;
            }
        } else {
            ps.add(name, std::move(a));
        }
    }
    if (off != buf.size()) throw IoError("trailing bytes in checkpoint: " + path);
    return ps;
}

}  // namespace opera::ad
