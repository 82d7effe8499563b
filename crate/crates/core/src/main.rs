fn main() {
    println!("oed-dino");
}
