// SPDX-License-Identifier: Apache-2.0
// Line-protocol rewriter stub: reads {"prompt": ...} per line on stdin and
// answers {"text": ...} on stdout.
//
//   stub_rewriter identity   answer with the original [Text] block
//   stub_rewriter echo       answer with the compressed text from the prompt
//   stub_rewriter garbage    answer with a line that is not JSON

#include <iostream>
#include <string>

#include <nlohmann/json.hpp>

namespace {

// Text between `header` and the next blank line.
std::string block_after(const std::string& prompt, const std::string& header) {
    auto p = prompt.find("\n" + header + "\n\n");
    if (p == std::string::npos) p = prompt.find(header + "\n\n");
    else ++p;
    if (p == std::string::npos) return {};
    p += header.size() + 2;
    auto e = prompt.find("\n\n", p);
    return prompt.substr(p, e == std::string::npos ? std::string::npos : e - p);
}

}  // namespace

int main(int argc, char** argv) {
    const std::string mode = argc > 1 ? argv[1] : "identity";
    std::string line;
    while (std::getline(std::cin, line)) {
        if (mode == "garbage") {
            std::cout << "not json" << std::endl;
            continue;
        }
        const auto req = nlohmann::json::parse(line, nullptr, false);
        if (req.is_discarded() || !req.contains("prompt")) {
            std::cout << R"({"error":"bad request"})" << std::endl;
            continue;
        }
        const std::string prompt = req["prompt"].get<std::string>();
        const std::string body = block_after(prompt, mode == "echo" ? "[Compressed Text]" : "[Text]");
        nlohmann::json resp;
        resp["text"] = "Revised Compressed Text: {" + body + "}\nReason: {stub}";
        std::cout << resp.dump() << std::endl;
    }
    return 0;
}
