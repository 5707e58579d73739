// Writes synthetic RGB test cards: make_fixture <dir> <width> <height> <count> [seed]
// produces <dir>/img_000.png ...

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "saat/image.hpp"

int main(int argc, char** argv) {
    if (argc < 5) {
        std::cerr << "usage: make_fixture <dir> <width> <height> <count> [seed]\n";
        return 2;
    }
    const std::filesystem::path dir = argv[1];
    const std::size_t w = std::strtoul(argv[2], nullptr, 10), h = std::strtoul(argv[3], nullptr, 10);
    const std::size_t n = std::strtoul(argv[4], nullptr, 10);
    const std::uint64_t seed = argc > 5 ? std::strtoull(argv[5], nullptr, 10) : 1;
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%03zu.png", i);
        saat::save_png(saat::test_pattern(w, h, seed + i), (dir / name).string());
    }
    return 0;
}
