mod common;

use common::{failures, identity_checks};

#[test]
fn exact_identities_hold() {
    let f = failures(&identity_checks());
    assert!(f.is_empty(), "{f:#?}");
}
