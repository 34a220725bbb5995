fn main() {
    davies::cli_main();
}
