// Writes a synthetic parallel corpus with PoS and CCG annotations.
#include "repflow/synthetic.hpp"

#include <iostream>
#include <string>

int main(int argc, char** argv) {
    if (argc < 3) {
        std::cerr << "usage: make_sample_corpus <prefix> <sentences> [seed]\n";
        return 2;
    }
    try {
        repflow::SyntheticLanguage lang;
        repflow::Rng rng(argc > 3 ? std::stoull(argv[3]) : 1);
        const auto samples = lang.generate(std::stoul(argv[2]), rng);
        const auto f = repflow::write_synthetic_corpus(argv[1], samples);
        std::cout << f.source.string() << " " << f.target.string() << " " << f.pos.string() << " " << f.ccg.string() << "\n";
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return 0;
}
