//! Count and slice text with the built-in rule tokenizer.
//!
//! ```bash
//! cargo run -p lcl --example tokenize
//! ```

use lcl::tokenize::Tokenizer;

fn main() -> lcl::Result<()> {
    let tok = Tokenizer::default_rule();
    let text = "RoPE's base went from 500,000 to 150M.";
    for t in tok.tokenize(text) {
        print!("[{}] ", t.text);
    }
    println!();
    println!("{} tokens", tok.count(text));
    println!("tokens 2..6: {:?}", tok.slice(text, 2, 6)?);
    Ok(())
}
