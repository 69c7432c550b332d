fn main() {
    // CLI wired up after the solver modules land.
}
