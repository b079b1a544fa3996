fn main() {
    // placeholder until the scenario runner lands
}
