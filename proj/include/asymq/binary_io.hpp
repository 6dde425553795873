// Copyright 2026 The asymq Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Little-endian binary encoding shared by the checkpoint and folded-model formats.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace asymq {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class BinaryWriter {
public:
    explicit BinaryWriter(std::ostream& os) : os_(os) {}

    template <typename T>
        requires std::is_arithmetic_v<T>
    void put(T value) {
        std::array<char, sizeof(T)> bytes;
        std::memcpy(bytes.data(), &value, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
        os_.write(bytes.data(), sizeof(T));
    }

    void put_magic(std::string_view magic) { os_.write(magic.data(), static_cast<std::streamsize>(magic.size())); }

    template <typename T>
    void put_vector(const std::vector<T>& values) {
        put<std::uint32_t>(static_cast<std::uint32_t>(values.size()));
        for (const T& v : values) put(v);
    }

    void put_string(std::string_view s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        os_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }

    bool ok() const { return static_cast<bool>(os_); }

private:
    std::ostream& os_;
};

class BinaryReader {
public:
    explicit BinaryReader(std::istream& is) : is_(is) {}

    template <typename T>
        requires std::is_arithmetic_v<T>
    T get() {
        std::array<char, sizeof(T)> bytes;
        if (!is_.read(bytes.data(), sizeof(T))) throw FormatError("unexpected end of file");
        if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
        T value;
        std::memcpy(&value, bytes.data(), sizeof(T));
        return value;
    }

    void expect_magic(std::string_view magic) {
        std::string got(magic.size(), '\0');
        if (!is_.read(got.data(), static_cast<std::streamsize>(got.size())) || got != magic) {
            throw FormatError("bad magic: expected " + std::string(magic));
        }
    }

    template <typename T>
    std::vector<T> get_vector(std::size_t limit = 1u << 28) {
        const auto n = get<std::uint32_t>();
        if (n > limit) throw FormatError("vector length " + std::to_string(n) + " exceeds limit");
        std::vector<T> out(n);
        for (auto& v : out) v = get<T>();
        return out;
    }

    std::string get_string() {
        const auto n = get<std::uint32_t>();
        if (n > (1u << 20)) throw FormatError("string too long");
        std::string s(n, '\0');
        if (!is_.read(s.data(), n)) throw FormatError("unexpected end of file");
        return s;
    }

private:
    std::istream& is_;
};

}  // namespace asymq
