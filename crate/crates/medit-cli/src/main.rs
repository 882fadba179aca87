fn main() {
    println!("medit");
}
