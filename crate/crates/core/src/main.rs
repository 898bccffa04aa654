// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    std::process::exit(padprobe::cli::parse_and_dispatch(std::env::args_os()));
}
