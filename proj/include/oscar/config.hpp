#pragma once

// Plain "key = value" text used by training configs and model manifests.
// '#' starts a comment; blank lines are ignored; keys may repeat.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "oscar/error.hpp"

namespace oscar {

class KeyValues {
   public:
    static KeyValues parse(const std::string& text, const std::string& origin = "config") {
        KeyValues kv;
        kv.origin_ = origin;
        std::istringstream in(text);
        std::string line;
        for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            auto eq = line.find('=');
            if (eq == std::string::npos)
                throw FormatError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
            auto key = trim(line.substr(0, eq));
            if (key.empty()) throw FormatError(origin + ":" + std::to_string(lineno) + ": empty key");
            kv.entries_.emplace_back(key, trim(line.substr(eq + 1)));
        }
        return kv;
    }

    static KeyValues load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot read '" + path + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path);
    }

    bool contains(const std::string& key) const {
        for (const auto& [k, v] : entries_)
            if (k == key) return true;
        return false;
    }

    /// Last value for the key; later lines override earlier ones.
    const std::string& get(const std::string& key) const {
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
            if (it->first == key) return it->second;
        throw FormatError(origin_ + ": missing key '" + key + "'");
    }

    std::vector<std::string> get_all(const std::string& key) const {
        std::vector<std::string> out;
        for (const auto& [k, v] : entries_)
            if (k == key) out.push_back(v);
        return out;
    }

    template <class T>
    T as(const std::string& key) const {
        return convert<T>(key, get(key));
    }

    template <class T>
    T as(const std::string& key, T fallback) const {
        return contains(key) ? as<T>(key) : fallback;
    }

    /// Keys not in `known`, in file order.
    std::vector<std::string> unknown_keys(const std::vector<std::string>& known) const {
        std::vector<std::string> out;
        for (const auto& [k, v] : entries_) {
            bool found = false;
            for (const auto& n : known) found = found || n == k;
            if (!found) out.push_back(k);
        }
        return out;
    }

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

    template <class T>
    T convert(const std::string& key, const std::string& value) const {
        if constexpr (std::is_same_v<T, std::string>) {
            return value;
        } else if constexpr (std::is_same_v<T, bool>) {
            if (value == "true" || value == "1") return true;
            if (value == "false" || value == "0") return false;
            throw FormatError(origin_ + ": '" + key + "' expects true/false, got '" + value + "'");
        } else {
            T out{};
            auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
            if (ec != std::errc{} || ptr != value.data() + value.size())
                throw FormatError(origin_ + ": '" + key + "' has unparsable value '" + value + "'");
            return out;
        }
    }

    static std::string trim(const std::string& s) {
        auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    static std::vector<std::string> split(const std::string& s, char sep) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string f;
        while (std::getline(ss, f, sep)) {
            f = trim(f);
            if (!f.empty()) out.push_back(f);
        }
        return out;
    }

   private:
    std::string origin_;
    std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace oscar
