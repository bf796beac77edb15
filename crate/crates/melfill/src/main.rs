fn main() {
    melfill::cli::main();
}
