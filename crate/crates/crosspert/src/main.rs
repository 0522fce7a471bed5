fn main() {
    crosspert::cli::main();
}
