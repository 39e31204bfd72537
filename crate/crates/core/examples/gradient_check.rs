//! Compare analytic gradients with central finite differences on random
//! small models.

use nadetopic::verify;

fn main() -> nadetopic::Result<()> {
    for (hidden, j) in [(3, 6), (6, 12), (10, 31)] {
        let r = verify::gradcheck(hidden, j, 3, 60, 42, 1e-5)?;
        let e = &r.max_rel_error;
        println!(
            "H={hidden:<2} J={j:<2} tested {}/{}  W {:.1e}  c {:.1e}  V {:.1e}  b {:.1e}  U {:.1e}  d {:.1e}",
            r.tested, r.attempted, e.w, e.c, e.v, e.b, e.u, e.d
        );
    }
    Ok(())
}
