fn main() {
    std::process::exit(ldvae_t::cli::main_entry());
}
