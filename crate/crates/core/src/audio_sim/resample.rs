use super::Waveform;

const HALF_TAPS: usize = 32;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Windowed-sinc polyphase resampler (Blackman window, 32 zero crossings per
/// side at the output Nyquist when downsampling).
pub fn resample(input: &Waveform, target_rate: u32) -> Waveform {
    if input.sample_rate == target_rate || input.is_empty() {
        return Waveform { samples: input.samples.clone(), sample_rate: target_rate };
    }
    let g = gcd(input.sample_rate as u64, target_rate as u64);
    let up = (target_rate as u64 / g) as usize;
    let down = (input.sample_rate as u64 / g) as usize;
    let cutoff = (up as f64 / down as f64).min(1.0);
    let half_width = (HALF_TAPS as f64 / cutoff).ceil() as isize;
    let taps_per_phase = (2 * half_width + 1) as usize;

    // One filter per output phase; phase p is the fractional offset p/up.
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            (0..taps_per_phase)
                .map(|j| {
                    let k = j as isize - half_width;
                    let x = k as f64 - frac;
                    let w_pos = (x + half_width as f64) / (2.0 * half_width as f64);
                    let window = if (0.0..=1.0).contains(&w_pos) {
                        0.42 - 0.5 * (2.0 * std::f64::consts::PI * w_pos).cos()
                            + 0.08 * (4.0 * std::f64::consts::PI * w_pos).cos()
                    } else {
                        0.0
                    };
                    cutoff * sinc(cutoff * x) * window
                })
                .collect()
        })
        .collect();

    let n_in = input.len();
    let n_out = ((n_in as u64 * up as u64) / down as u64) as usize;
    let samples = (0..n_out)
        .map(|n| {
            let pos = n * down;
            let base = (pos / up) as isize;
            let phase = &phases[pos % up];
            let mut acc = 0.0f64;
            for (j, &h) in phase.iter().enumerate() {
                let idx = base + j as isize - half_width;
                if idx >= 0 && (idx as usize) < n_in {
                    acc += h * input.samples[idx as usize] as f64;
                }
            }
            acc as f32
        })
        .collect();
    Waveform { samples, sample_rate: target_rate }
}
