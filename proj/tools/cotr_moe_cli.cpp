// Copyright (C) 2026 cotr-moe contributors
// SPDX-License-Identifier: Apache-2.0

#include "cotr_moe/commands.hpp"

int main(int argc, char** argv) { return cotr_moe::cli::run_cli(argc, argv); }
