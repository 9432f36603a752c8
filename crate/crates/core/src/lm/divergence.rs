/// Default smoothing window for [`detect_divergence`].
pub const DEFAULT_WINDOW: usize = 50;
/// Default rise factor for [`detect_divergence`].
pub const DEFAULT_RATIO: f64 = 1.5;

/// Flags every step whose trailing `window`-mean loss exceeds `ratio` times
/// the best trailing mean seen before it. Steps before the first full window
/// are never flagged.
pub fn detect_divergence(stream: &[(u64, f64)], window: usize, ratio: f64) -> Vec<u64> {
    assert!(window >= 1, "window must be at least 1");
    assert!(ratio > 1.0, "ratio must exceed 1");
    let mut flags = Vec::new();
    let mut best = f64::INFINITY;
    let mut sum = 0.0;
    for (i, &(step, loss)) in stream.iter().enumerate() {
        sum += loss;
        if i >= window {
            sum -= stream[i - window].1;
        }
        if i + 1 < window {
            continue;
        }
        let smoothed = sum / window as f64;
        if smoothed > ratio * best {
            flags.push(step);
        }
        if smoothed < best {
            best = smoothed;
        }
    }
    flags
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(losses: impl IntoIterator<Item = f64>) -> Vec<(u64, f64)> {
        losses
            .into_iter()
            .enumerate()
            .map(|(i, l)| (i as u64, l))
            .collect()
    }

    #[test]
    fn decreasing_loss_never_flags() {
        let s = stream((0..500).map(|i| 5.0 / (1.0 + i as f64 * 0.01)));
        assert!(detect_divergence(&s, 50, 1.5).is_empty());
    }

    #[test]
    fn sustained_jump_flags_within_one_window() {
        let window = 20;
        let jump_at = 300u64;
        // Decreasing to ~1.0, then a sustained x3 jump.
        let s = stream((0..600).map(|i| {
            let base = 1.0 + 2.0 * (-(i as f64) / 60.0).exp();
            if i >= jump_at {
                3.0 * base
            } else {
                base
            }
        }));
        let flags = detect_divergence(&s, window, 1.5);
        let first = *flags.first().expect("jump must be flagged");
        assert!(
            first >= jump_at && first < jump_at + window as u64,
            "first flag {first}"
        );
        // Oracle: the trailing mean crosses 1.5x the pre-jump best once
        // enough post-jump samples are inside the window.
        let best = s[..jump_at as usize]
            .windows(window)
            .map(|w| w.iter().map(|x| x.1).sum::<f64>() / window as f64)
            .fold(f64::INFINITY, f64::min);
        let expected = (jump_at as usize..600)
            .find(|&i| {
                s[i + 1 - window..=i].iter().map(|x| x.1).sum::<f64>() / window as f64 > 1.5 * best
            })
            .unwrap() as u64;
        assert_eq!(first, expected);
    }

    #[test]
    fn infinite_ratio_disables_detector() {
        let s = stream((0..200).map(|i| if i > 100 { 1e6 } else { 1.0 }));
        assert!(detect_divergence(&s, 10, f64::INFINITY).is_empty());
    }

    #[test]
    fn short_streams_are_quiet() {
        assert!(detect_divergence(&stream([1.0, 100.0]), 5, 1.5).is_empty());
    }
}
