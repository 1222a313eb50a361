//! Finite-difference checks of every autodiff op and of the full tiny network
//! with the training loss.
//!
//! cargo run --release --example grad_check

use jointalign::diff_engine::check_every_op;
use jointalign::training::network_loss_grad_check;

fn main() -> jointalign::Result<()> {
    for (name, err) in check_every_op(10, 1e-5)? {
        println!("{name:<14} {err:.2e}");
    }
    println!("{:<14} {:.2e}", "tiny network", network_loss_grad_check(21, 1e-4)?);
    Ok(())
}
