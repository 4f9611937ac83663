#include <iostream>
int main() { std::cout << "kws: CLI under construction\n"; return 0; }
