#include "featdrive/pipeline/pipeline.hpp"
int main() { return 0; }
