// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "fsdp/cli/app.hpp"

int main(int argc, char** argv) { return fsdp::cli::main_with(argc, argv, std::cout, std::cerr); }
