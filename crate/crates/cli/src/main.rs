fn main() {
    println!("m2w");
}
