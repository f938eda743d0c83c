fn main() { dygr::cli::run(); }
