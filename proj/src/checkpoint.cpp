#include "bilayer/checkpoint.hpp"

#include <sstream>

#include "bilayer/png_io.hpp"

namespace bilayer {

namespace {

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = (unsigned char)((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf[i]) << (8 * i);
    return v;
}

}  // namespace

void Checkpoint::add(std::string name, Tensor t) {
    if (has(name)) throw ContractError("checkpoint: duplicate tensor name " + name);
    entries_.emplace_back(std::move(name), std::move(t));
}

const Tensor& Checkpoint::get(const std::string& name) const {
    for (const auto& [n, t] : entries_)
        if (n == name) return t;
    throw LookupError("checkpoint: no tensor named " + name);
}

bool Checkpoint::has(const std::string& name) const {
    for (const auto& [n, t] : entries_)
        if (n == name) return true;
    return false;
}

void Checkpoint::save(const std::string& path) const {
    std::ostringstream os(std::ios::binary);
    for (const auto& [name, t] : entries_) {
        put_u64(os, name.size());
        os.write(name.data(), std::streamsize(name.size()));
        dump_tensor(os, t);
    }
    write_file_atomic(path, os.str());
}

Checkpoint Checkpoint::load(const std::string& path) {
    const std::string bytes = read_file(path);
    std::istringstream is(bytes, std::ios::binary);
    Checkpoint ck;
    while (is.peek() != std::char_traits<char>::eof()) {
        const std::uint64_t len = get_u64(is);
        if (!is) break;
        if (len > 4096) throw IoError("checkpoint load: implausible name length");
        std::string name(len, '\0');
        is.read(name.data(), std::streamsize(len));
        if (!is) throw IoError("checkpoint load: truncated name");
        ck.add(std::move(name), load_tensor(is));
    }
    return ck;
}

}  // namespace bilayer
