#include <cstdio>

int main() {
    std::puts("tpl: not wired up yet");
    return 0;
}
