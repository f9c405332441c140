fn main() {
    std::process::exit(ticketlab::cli::main_with(std::env::args_os()));
}
