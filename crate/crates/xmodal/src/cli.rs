use clap::Parser;

#[derive(Parser)]
struct Placeholder {}

pub fn run(_args: impl Iterator<Item = String>) -> i32 {
    0
}
