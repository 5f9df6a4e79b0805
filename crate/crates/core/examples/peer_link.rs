//! Two nodes on loopback sharing their indications. The merged output is
//! GAP only while both sides report a fresh GAP.
//!
//! ```text
//! cargo run --example peer_link
//! ```

use std::thread::sleep;
use std::time::{Duration, Instant};

use crossgap::detector::Indication::{self, Gap, Traffic};
use crossgap::peer::{LinkConfig, LinkRole, PeerLink};

fn wait_for(link: &PeerLink, want: Indication, start: Instant) {
    let deadline = Instant::now() + Duration::from_secs(5);
    while link.merged().state != want && Instant::now() < deadline {
        sleep(Duration::from_millis(5));
    }
    let m = link.merged();
    println!("  t={:6.3} s  merged {}  (staleness {:.3} s)", start.elapsed().as_secs_f64(), m.state, m.staleness);
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let role = LinkRole::listen("127.0.0.1:0")?;
    let LinkRole::Listen(listener) = &role else { unreachable!() };
    let addr = listener.local_addr()?;
    let a = PeerLink::spawn(role, LinkConfig::default())?;
    let b = PeerLink::spawn(LinkRole::Connect(addr), LinkConfig::default())?;
    println!("node A listening on {addr}, node B connecting");

    let start = Instant::now();
    let publish = |sa: Indication, sb: Indication| {
        a.publish(sa, 0.0);
        b.publish(sb, 0.0);
    };

    println!("A=GAP, B=TRAFFIC");
    publish(Gap, Traffic);
    wait_for(&a, Traffic, start);

    println!("both GAP");
    publish(Gap, Gap);
    wait_for(&a, Gap, start);

    println!("B stops publishing; A keeps reporting GAP");
    let until = Instant::now() + Duration::from_secs(3);
    while Instant::now() < until && a.merged().state == Gap {
        a.publish(Gap, 0.0);
        sleep(Duration::from_millis(100));
    }
    wait_for(&a, Traffic, start);

    println!("B shuts down");
    b.shutdown();
    sleep(Duration::from_millis(300));
    a.publish(Gap, 0.0);
    println!("  remote present: {}, status {:?}", a.remote().is_some(), a.status());
    wait_for(&a, Traffic, start);
    a.shutdown();
    Ok(())
}
