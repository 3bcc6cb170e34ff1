fn main() { println!("hetconn (under construction)"); }
