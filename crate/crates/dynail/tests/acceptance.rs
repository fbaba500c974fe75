fn main() { println!("acceptance: placeholder"); }
