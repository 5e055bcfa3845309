use plasticgraph::io::parse_problem;
use plasticgraph::optim::LbfgsConfig;
use plasticgraph::solver::SolutionState;
#[test]
fn probe() {
    let p = parse_problem(std::path::Path::new("../../benchmarks/beam_kinematic_3d.json")).unwrap().build().unwrap();
    let mut s = p.solver.clone();
    let first = s.run_load_step(&SolutionState::virgin(&s.model), &p.steps[0], true).unwrap();
    let second = s.run_load_step(&first, &p.steps[1], true).unwrap();
    let reference = s.newton_reference(&first, &p.steps[1], 1e-12, 100).unwrap();
    eprintln!("ref diff {:e}", plasticgraph::solver::error_metrics(&second.u, &reference.u).l2.unwrap());
    for tol in [1e-4, 1e-6, 1e-8, 1e-10] {
        s.optimizer = LbfgsConfig { tol_grad: tol, max_iters: 20000, ..Default::default() };
        let w = s.run_load_step(&first, &p.steps[1], true).unwrap();
        let c = s.run_load_step(&first, &p.steps[1], false).unwrap();
        eprintln!("grad tol {tol:e}: warm {} {} cold {} {}", w.iterations(), w.termination().unwrap(), c.iterations(), c.termination().unwrap());
    }
    for tol in [1e-2, 1e-3, 1e-4, 1e-6] {
        let w = s.iterations_to_tolerance(&first, &p.steps[1], true, &reference.u, tol).unwrap();
        let c = s.iterations_to_tolerance(&first, &p.steps[1], false, &reference.u, tol).unwrap();
        eprintln!("l2 tol {tol:e}: warm {w:?} cold {c:?}");
    }
    let third_w = s.run_load_step(&second, &p.steps[2], true).unwrap();
    let third_c = s.run_load_step(&second, &p.steps[2], false).unwrap();
    eprintln!("step3 warm {} cold {}", third_w.iterations(), third_c.iterations());
}
