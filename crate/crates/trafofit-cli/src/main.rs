fn main() {
    println!("trafofit");
}
