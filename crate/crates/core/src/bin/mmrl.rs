fn main() {
    mmrl::config::cli_main();
}
