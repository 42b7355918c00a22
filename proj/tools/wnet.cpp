// SPDX-License-Identifier: Apache-2.0
#include "wnet/cli.hpp"

int main(int argc, char** argv) { return wnet::run_cli(argc, argv); }
