use sleepgate::data::{QRY, UPD};

/// Labels recomputed by scanning the raw token stream from scratch.
pub struct Oracle {
    pub superseded: Vec<usize>,
    pub gold: Vec<usize>,
    pub stale: Vec<Vec<usize>>,
}

pub fn brute_force(tokens: &[usize]) -> Oracle {
    let mut updates: Vec<(usize, usize, usize)> = Vec::new();
    let mut queries: Vec<usize> = Vec::new();
    let mut i = 1;
    while i < tokens.len() {
        if tokens[i] == UPD {
            updates.push((i, tokens[i + 1], tokens[i + 2]));
            i += 3;
        } else {
            assert_eq!(tokens[i], QRY);
            queries.push(tokens[i + 1]);
            i += 2;
        }
    }
    let mut superseded = Vec::new();
    for (a, &(pos, ent, _)) in updates.iter().enumerate() {
        if updates[a + 1..].iter().any(|u| u.1 == ent) {
            superseded.push(pos);
        }
    }
    let mut gold = Vec::new();
    let mut stale = Vec::new();
    for &q in &queries {
        let vals: Vec<usize> = updates.iter().filter(|u| u.1 == q).map(|u| u.2).collect();
        let g = *vals.last().expect("queried entity was updated");
        gold.push(g);
        // An earlier value equal to the current one is not a stale answer.
        stale.push(vals[..vals.len() - 1].iter().copied().filter(|&v| v != g).collect());
    }
    Oracle { superseded, gold, stale }
}
