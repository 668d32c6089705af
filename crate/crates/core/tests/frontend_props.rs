use memctrl::frontend::*;
use proptest::prelude::*;

#[test]
fn dac_steps_are_exactly_one_lsb() {
    let dac = DacSpec::default();
    for code in 0..dac.max_code() as i64 {
        let lo = dac_voltage(code, &dac).unwrap();
        let hi = dac_voltage(code + 1, &dac).unwrap();
        assert!(lo < hi);
        assert!((hi - lo - dac.lsb).abs() < 1e-15, "step at code {code}");
    }
    assert!(dac_voltage(-1, &dac).is_err());
    assert!(dac_voltage(256, &dac).is_err());
}

#[test]
fn quantize_inverts_dac_on_every_code() {
    let dac = DacSpec::default();
    for code in 0..=dac.max_code() {
        let v = dac_voltage(code as i64, &dac).unwrap();
        assert_eq!(quantize_to_dac(v, &dac).unwrap(), (code, v));
    }
}

#[test]
fn quantize_matches_brute_force_nearest_code() {
    let dac = DacSpec::default();
    let levels: Vec<f64> = (0..=255).map(|c| (c + 1) as f64 * 6.25e-3).collect();
    for k in 0..2000 {
        let v = 6.25e-3 + (1.6 - 6.25e-3) * k as f64 / 1999.0;
        let best = levels.iter().map(|l| (l - v).abs()).fold(f64::INFINITY, f64::min);
        let (_, got) = quantize_to_dac(v, &dac).unwrap();
        assert!(((got - v).abs() - best).abs() < 1e-15, "v = {v}");
    }
}

#[test]
fn adc_ramp_error_within_one_lsb() {
    let adc = AdcSpec::default();
    let mut last = 0;
    for k in 0..=100_000 {
        let i = adc.i_full_scale * k as f64 / 100_000.0;
        let (code, iq) = adc_read(i, &adc).unwrap();
        assert!(code >= last);
        assert!((iq - i).abs() <= adc.lsb() * (1.0 + 1e-9), "i = {i}");
        last = code;
    }
    assert_eq!(last, 255);
}

proptest! {
    #[test]
    fn regulator_is_idempotent_and_non_amplifying(v in 0.2f64..=1.6) {
        let spec = RegulatorSpec::default();
        let once = regulate_voltage(v, &spec).unwrap();
        prop_assert!(once <= v.max(spec.v_dropout_max));
        prop_assert_eq!(regulate_voltage(once, &spec).unwrap(), once);
    }

    #[test]
    fn converter_current_strictly_decreasing(a in 0.01f64..1.8, b in 0.01f64..1.8) {
        prop_assume!(a != b);
        let spec = CurrentSourceSpec::default();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let i_lo = regulated_current(lo, &spec).unwrap();
        let i_hi = regulated_current(hi, &spec).unwrap();
        prop_assert!(i_lo > i_hi);
        // Linear in the reference with slope -1/r_conv.
        prop_assert!(((i_lo - i_hi) - (hi - lo) / spec.r_conv).abs() <= 1e-12 * i_lo.abs().max(1e-9));
    }

    #[test]
    fn adc_monotone_with_bounded_error(a in 0.0f64..=256e-6, b in 0.0f64..=256e-6) {
        let adc = AdcSpec::default();
        let (ca, ia) = adc_read(a, &adc).unwrap();
        let (cb, _) = adc_read(b, &adc).unwrap();
        if a <= b {
            prop_assert!(ca <= cb);
        }
        prop_assert!((ia - a).abs() <= adc.lsb() * (1.0 + 1e-9));
    }

    #[test]
    fn pwm_integral_is_closed_form(code in 0u32..256, periods in 1usize..20, duty in 0.05f64..=1.0) {
        let dac = DacSpec::default();
        let period = 1e-3;
        let pulse = PulseSpec { amplitude_code: code, width: duty * period, period, polarity_terminal: memctrl::device::Terminal::OhmicElectrode };
        let w = pwm_waveform(&pulse, periods, &dac).unwrap();
        let amp = dac_voltage(code as i64, &dac).unwrap();
        let expected = periods as f64 * pulse.width * amp;
        // Trapezoid sampling of the waveform as an independent check.
        let n = 20_000;
        let dt = w.duration() / n as f64;
        let trap: f64 = (0..n).map(|k| w.value_at((k as f64 + 0.5) * dt) * dt).sum();
        prop_assert!((w.integral() - expected).abs() <= 1e-12 * expected);
        prop_assert!((trap - expected).abs() <= 2.0 * periods as f64 * amp * dt);
    }
}
