// Experiment CLI. Subcommands are wired up as the library modules land.
#include <cstdio>

int main() {
    std::puts("capsroute: no subcommand given");
    return 2;
}
