// Reference mock server for the remote scorer protocol: POST /score with WAV
// bytes, response {"CE": .., "CU": .., "PC": .., "PQ": ..}. Useful for
// exercising the remote path without the real aesthetic model.

#include <atomic>
#include <chrono>
#include <iostream>
#include <string>
#include <thread>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

int main(int argc, char** argv) {
    CLI::App app{"mock aesthetic scorer server"};
    int port = 8900;
    double ce = 5.0, cu = 6.0, pc = 2.5, pq = 7.0;
    int fail_first = 0;
    int delay_ms = 0;
    bool malformed = false;
    app.add_option("--port", port);
    app.add_option("--ce", ce);
    app.add_option("--cu", cu);
    app.add_option("--pc", pc);
    app.add_option("--pq", pq);
    app.add_option("--fail-first", fail_first, "respond 503 to the first N requests");
    app.add_option("--delay-ms", delay_ms, "sleep before answering");
    app.add_flag("--malformed", malformed, "reply with invalid JSON");
    CLI11_PARSE(app, argc, argv);

    httplib::Server server;
    std::atomic<int> requests{0};
    server.Post("/score", [&](const httplib::Request& req, httplib::Response& res) {
        const int k = requests.fetch_add(1);
        if (delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
        if (k < fail_first) {
            res.status = 503;
            res.set_content("busy", "text/plain");
            return;
        }
        if (malformed) {
            res.set_content("{not json", "application/json");
            return;
        }
        // score magnitude nudged by payload size so distinct clips differ
        const double nudge = static_cast<double>(req.body.size() % 97) / 1000.0;
        nlohmann::json j{{"CE", ce + nudge}, {"CU", cu}, {"PC", pc}, {"PQ", pq}};
        res.set_content(j.dump(), "application/json");
    });

    std::cout << "mock scorer listening on 127.0.0.1:" << port << std::endl;
    if (!server.listen("127.0.0.1", port)) {
        std::cerr << "error: cannot bind port " << port << "\n";
        return 1;
    }
    return 0;
}
